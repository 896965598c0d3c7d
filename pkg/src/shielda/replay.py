"""Deterministic replay of recorded handling decisions.

Replay re-derives every classification, pattern choice, reclassification and
no-change routing decision from the inputs recorded in the log, using the
same pure functions the engine used, and reports where the two disagree.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

from shielda.agentops import EventKind, WorkflowEvent
from shielda.classifier import Classification, RawExceptionSignal, RuleSet, reclassify
from shielda.errors import MalformedLog
from shielda.escalation import DecisionKind, root_cause_trace, trace_seeds
from shielda.registry import PatternRegistry, select_pattern


@dataclass(frozen=True)
class ReplayDecision:
    seq: int
    kind: EventKind
    recorded: Any
    derived: Any

    @property
    def diverged(self) -> bool:
        return self.recorded != self.derived

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "kind": self.kind.value,
            "recorded": self.recorded,
            "derived": self.derived,
            "diverged": self.diverged,
        }


@dataclass(frozen=True)
class ReplayReport:
    decisions: tuple[ReplayDecision, ...]

    @property
    def divergences(self) -> list[ReplayDecision]:
        return [d for d in self.decisions if d.diverged]

    @property
    def clean(self) -> bool:
        return not self.divergences

    def to_dict(self) -> dict:
        return {
            "decisions": len(self.decisions),
            "divergences": [d.to_dict() for d in self.divergences],
        }


def _event(events: Sequence[WorkflowEvent], seq: Any, at: WorkflowEvent) -> WorkflowEvent:
    if not isinstance(seq, int) or not 1 <= seq < at.seq:
        raise MalformedLog(f"event {at.seq} references invalid seq {seq!r}")
    return events[seq - 1]


def _signal_of(event: WorkflowEvent) -> RawExceptionSignal:
    if event.kind is not EventKind.EXCEPTION_RAISED:
        raise MalformedLog(f"event {event.seq} is {event.kind.value}, expected ExceptionRaised")
    try:
        return RawExceptionSignal.from_dict(event.payload["signal"])
    except (KeyError, ValueError, TypeError) as exc:
        raise MalformedLog(f"event {event.seq}: bad signal: {exc}") from exc


def replay(
    events: Sequence[WorkflowEvent], registry: PatternRegistry, rules: RuleSet
) -> ReplayReport:
    for i, event in enumerate(events, start=1):
        if event.seq != i:
            raise MalformedLog(f"seq gap: position {i} holds seq {event.seq}")
    overrides: dict[str, str] = {}
    decisions: list[ReplayDecision] = []
    for event in events:
        payload = event.payload
        if event.kind is EventKind.GOAL_INGESTED:
            overrides = dict(payload.get("pattern_overrides", {}))
        elif event.kind is EventKind.CLASSIFIED:
            source = _event(events, payload["exception_seq"], event)
            derived = rules.classify(_signal_of(source))
            decisions.append(
                ReplayDecision(event.seq, event.kind, payload["classification"], derived.to_dict())
            )
        elif event.kind is EventKind.PATTERN_SELECTED:
            pattern, source = select_pattern(registry, overrides, payload["exception_id"])
            decisions.append(
                ReplayDecision(
                    event.seq,
                    event.kind,
                    [payload["pattern_id"], payload["source"]],
                    [pattern.pattern_id, source],
                )
            )
        elif event.kind is EventKind.RECLASSIFIED:
            symptom = _event(events, payload["symptom_seq"], event)
            signal = _signal_of(symptom)
            chain = root_cause_trace(events, symptom.seq, trace_seeds(symptom, signal))
            prior = Classification.from_dict(payload["prior"])
            derived = reclassify(rules, prior, chain)
            decisions.append(
                ReplayDecision(
                    event.seq,
                    event.kind,
                    {"chain": payload["chain"], "classification": payload["classification"]},
                    {"chain": chain.to_dict(), "classification": derived.to_dict()},
                )
            )
        elif event.kind is EventKind.ESCALATION_ROUTED:
            decisions.append(_replay_routing(events, event, rules))
    return ReplayReport(tuple(decisions))


def _replay_routing(
    events: Sequence[WorkflowEvent], event: WorkflowEvent, rules: RuleSet
) -> ReplayDecision:
    """Check a no-change routing: depth limit, or a reclassification that changed nothing."""
    started = next(
        (
            e
            for e in reversed(events[: event.seq - 1])
            if e.kind is EventKind.ESCALATION_STARTED and e.thread_id == event.thread_id
        ),
        None,
    )
    if started is None:
        raise MalformedLog(f"routing event {event.seq} has no EscalationStarted before it")
    depth, max_depth = event.payload["depth"], event.payload.get("max_depth")
    recorded = event.payload["decision"]
    if max_depth is not None and depth >= max_depth:
        derived = DecisionKind.TERMINATE_MISSION.value
    else:
        # reaching a sink means the diagnosis was left unchanged; verify that
        symptom = _event(events, started.payload["symptom_seq"], started)
        chain = root_cause_trace(events, symptom.seq, trace_seeds(symptom, _signal_of(symptom)))
        prior = Classification.from_dict(started.payload["classification"])
        unchanged = reclassify(rules, prior, chain).exception_id == prior.exception_id
        derived = DecisionKind.EXTERNAL_SINK.value if unchanged else DecisionKind.RECLASSIFIED.value
    return ReplayDecision(event.seq, event.kind, recorded, derived)
