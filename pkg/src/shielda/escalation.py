"""Escalation controller: root-cause tracing, reclassification and routing.

When local handling gives up, the controller walks the event log backwards
from the failing event, following shared entities, until it reaches the
reasoning/planning event that introduced them.  The root is reclassified;
a changed diagnosis re-enters the executor with a new pattern, anything else
goes to an external sink.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Any, Callable, Iterable, Mapping, Sequence

from shielda.agentops import EventKind, EventLog, WorkflowEvent
from shielda.classifier import Classification, RawExceptionSignal, RuleSet, reclassify
from shielda.entities import EntityKind, EntityRef, extract_entities
from shielda.errors import DirectiveError, MissingGoalError
from shielda.registry import HandlerPattern
from shielda.taxonomy import Phase

if TYPE_CHECKING:
    from shielda.executor import HandlingContext, HandlingOutcome

DEFAULT_MAX_ESCALATION_DEPTH = 3


@dataclass(frozen=True)
class CausalLink:
    event: WorkflowEvent
    shared_entities: frozenset[EntityRef]

    @property
    def seq(self) -> int:
        return self.event.seq

    def to_dict(self) -> dict:
        return {
            "seq": self.event.seq,
            "kind": self.event.kind.value,
            "phase": self.event.phase.value,
            "shared_entities": [e.to_dict() for e in sorted(self.shared_entities)],
        }


@dataclass(frozen=True)
class CausalChain:
    """Links ordered from the symptom (latest) to the root (earliest)."""

    links: tuple[CausalLink, ...]
    # seqs of events in other missions that touched the traced entities
    cross_mission: tuple[int, ...] = ()

    @property
    def root(self) -> WorkflowEvent:
        return self.links[-1].event

    @property
    def symptom(self) -> WorkflowEvent:
        return self.links[0].event

    @property
    def seqs(self) -> list[int]:
        return [link.seq for link in self.links]

    def __len__(self) -> int:
        return len(self.links)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"links": [link.to_dict() for link in self.links]}
        if self.cross_mission:
            out["cross_mission"] = list(self.cross_mission)
        return out


def root_cause_trace(
    events: Sequence[WorkflowEvent], symptom_seq: int, seeds: Iterable[EntityRef]
) -> CausalChain:
    """Backward-chain from ``symptom_seq`` over events that share entities.

    The accumulated entity set starts at ``seeds`` and grows with every event
    that joins.  The scan stops at the first joining reasoning/planning event,
    which becomes the root, or at the start of the log.  Only events from the
    symptom's mission are eligible.
    """
    by_seq = {e.seq: e for e in events}
    symptom = by_seq[symptom_seq]
    accumulated = set(seeds)
    links = [CausalLink(symptom, frozenset(accumulated))]
    cross: list[int] = []
    for seq in range(symptom_seq - 1, 0, -1):
        event = by_seq.get(seq)
        if event is None:
            continue
        shared = event.entities & accumulated
        if not shared:
            continue
        if event.mission_id != symptom.mission_id:
            cross.append(seq)
            continue
        links.append(CausalLink(event, frozenset(shared)))
        accumulated |= event.entities
        if event.phase is Phase.REASONING_PLANNING:
            break
    return CausalChain(tuple(links), tuple(cross))


def trace_seeds(symptom: WorkflowEvent, signal: RawExceptionSignal | None = None) -> frozenset[EntityRef]:
    """Entities a trace starts from: the symptom's own plus the signal text's."""
    seeds = set(symptom.entities)
    if signal is not None:
        seeds |= extract_entities(signal.message)
    return frozenset(seeds)


@dataclass(frozen=True)
class CorrectiveDirective:
    original_goal: str
    injected_constraints: tuple[str, ...]
    provenance: int
    target: str = "ReasoningModule"

    @property
    def text(self) -> str:
        block = "\n".join(f"- {c}" for c in self.injected_constraints)
        return f"{self.original_goal}\n\nSYSTEM CONSTRAINTS (must be obeyed):\n{block}"

    def to_dict(self) -> dict:
        return {
            "original_goal": self.original_goal,
            "injected_constraints": list(self.injected_constraints),
            "target": self.target,
            "provenance": self.provenance,
            "text": self.text,
        }


def synthesize_corrective_directive(
    root: WorkflowEvent,
    original_goal: str,
    violated_constraint: str,
    entities: Iterable[EntityRef] | None = None,
) -> CorrectiveDirective:
    """Goal text plus a constraint block that names every root-cause entity.

    ``entities`` defaults to all of the root event's entities.  Entities the
    constraint text does not already mention are appended to it verbatim.
    """
    if root.phase is not Phase.REASONING_PLANNING:
        raise DirectiveError(f"root event {root.seq} is not a reasoning/planning event")
    if not original_goal or not original_goal.strip():
        raise MissingGoalError("no goal recorded for this mission")
    if not violated_constraint or not violated_constraint.strip():
        raise DirectiveError("violated constraint must be non-empty")
    chosen = sorted(root.entities if entities is None else entities)
    missing = [e.value for e in chosen if e.value not in violated_constraint]
    constraint = violated_constraint.strip()
    if missing:
        constraint += " Applies to: " + ", ".join(f"`{v}`" for v in missing) + "."
    return CorrectiveDirective(
        original_goal=original_goal, injected_constraints=(constraint,), provenance=root.seq
    )


def _under(path: str, prefixes: Iterable[str]) -> bool:
    return any(path.startswith(p) for p in prefixes)


# Ordered template table: the first template whose predicate holds wins.
_CONSTRAINT_TEMPLATES: tuple[tuple[Callable[[EntityRef, tuple[str, ...]], bool], str], ...] = (
    (
        lambda e, prot: e.kind is EntityKind.FILE_PATH
        and _under(e.value, prot)
        and ".github/workflows/" in e.value,
        "You are explicitly forbidden from modifying workflow files. "
        "Do not create, modify, or push `{value}`; complete the goal without touching it.",
    ),
    (
        lambda e, prot: e.kind is EntityKind.FILE_PATH and _under(e.value, prot),
        "You are forbidden from modifying protected path `{value}`. Leave it untouched.",
    ),
    (
        lambda e, prot: e.kind is EntityKind.FILE_PATH,
        "Do not modify `{value}` in the revised plan.",
    ),
    (
        lambda e, prot: e.kind is EntityKind.TOOL_NAME,
        "Do not call tool `{value}`; use an alternative route.",
    ),
    (
        lambda e, prot: e.kind is EntityKind.AGENT_ID,
        "Do not depend on agent `{value}` for this goal.",
    ),
    (
        lambda e, prot: e.kind is EntityKind.URL,
        "Do not contact `{value}`.",
    ),
    (
        lambda e, prot: e.kind is EntityKind.IDENTIFIER,
        "Do not read or trust the value of `{value}`.",
    ),
)


def derive_constraints(
    entities: Iterable[EntityRef], protected_paths: Iterable[str] = ()
) -> list[str]:
    prot = tuple(protected_paths)
    out = []
    for entity in sorted(entities):
        for predicate, template in _CONSTRAINT_TEMPLATES:
            if predicate(entity, prot):
                out.append(template.format(value=entity.value))
                break
    return out


def root_cause_entities(chain: CausalChain, signal: RawExceptionSignal) -> frozenset[EntityRef]:
    """Root entities that the failing signal itself names, else the root link's shared set."""
    named = chain.root.entities & extract_entities(signal.message)
    return frozenset(named) if named else chain.links[-1].shared_entities


class DecisionKind(str, Enum):
    RECLASSIFIED = "Reclassified"
    EXTERNAL_SINK = "ExternalSink"
    TERMINATE_MISSION = "TerminateMission"


@dataclass(frozen=True)
class EscalationDecision:
    kind: DecisionKind
    depth: int
    classification: Classification | None = None
    pattern: HandlerPattern | None = None
    pattern_source: str = ""
    sink_id: str | None = None
    payload: Mapping[str, Any] | None = None
    reason: str = ""
    chain: CausalChain | None = None


class EscalationSink:
    """Named output for escalations that the engine cannot resolve itself."""

    sink_id = "sink"
    # whether the mission stays open waiting for the sink to act
    keeps_mission_open = False

    def __init__(self) -> None:
        self.records: list[dict] = []

    def deliver(self, record: dict) -> None:
        self.records.append(record)


class HumanQueueSink(EscalationSink):
    """Appends escalation records to a JSONL queue for a human supervisor."""

    sink_id = "human"
    keeps_mission_open = True

    def __init__(self, queue_path: str | Path | None = None) -> None:
        super().__init__()
        self.queue_path = Path(queue_path) if queue_path is not None else None

    def deliver(self, record: dict) -> None:
        super().deliver(record)
        if self.queue_path is not None:
            self.queue_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.queue_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


class DropSink(EscalationSink):
    """Records the escalation and lets the mission terminate."""

    sink_id = "drop"


def make_sink(name: str, queue_path: str | Path | None = None) -> EscalationSink:
    if name == "human":
        return HumanQueueSink(queue_path)
    if name == "drop":
        return DropSink()
    raise ValueError(f"unknown escalation sink {name!r}")


@dataclass
class EscalationConfig:
    max_depth: int = DEFAULT_MAX_ESCALATION_DEPTH
    sinks: dict[str, EscalationSink] = field(default_factory=lambda: {"human": HumanQueueSink()})
    default_sink: str = "human"


PatternSelector = Callable[[str], "tuple[HandlerPattern, str]"]


def _log_excerpt(events: Sequence[WorkflowEvent], chain: CausalChain) -> list[dict]:
    return [
        {"seq": link.seq, "kind": link.event.kind.value, "payload": link.event.payload}
        for link in chain.links
    ]


def escalate(
    ctx: "HandlingContext",
    outcome: "HandlingOutcome | None",
    log: EventLog,
    *,
    rules: RuleSet,
    select_pattern: PatternSelector,
    depth: int,
    config: EscalationConfig | None = None,
) -> EscalationDecision:
    """Diagnose a failure that local handling could not absorb and route it.

    ``depth`` is the number of reclassification hops already taken in this
    mission.  At the depth limit the mission is terminated.
    """
    config = config or EscalationConfig()
    thread, mission = ctx.thread_id, ctx.mission_id
    log.append(
        EventKind.ESCALATION_STARTED,
        thread_id=thread,
        mission_id=mission,
        phase=ctx.classification.phase,
        payload={
            "depth": depth,
            "symptom_seq": ctx.symptom_seq,
            "classification": ctx.classification.to_dict(),
            "pattern_id": ctx.pattern.pattern_id,
            "outcome": outcome.status.value if outcome is not None else None,
        },
    )
    events = log.snapshot(ctx.symptom_seq)
    symptom = events[ctx.symptom_seq - 1]
    chain = root_cause_trace(events, ctx.symptom_seq, trace_seeds(symptom, ctx.signal))

    def route(kind: DecisionKind, **extra: Any) -> EscalationDecision:
        payload = {"decision": kind.value, "depth": depth, "max_depth": config.max_depth, **extra}
        log.append(
            EventKind.ESCALATION_ROUTED,
            thread_id=thread,
            mission_id=mission,
            phase=ctx.classification.phase,
            payload=payload,
        )
        return EscalationDecision(kind=kind, depth=depth, chain=chain, **_decision_fields(extra))

    if depth >= config.max_depth:
        return route(DecisionKind.TERMINATE_MISSION, reason="escalation depth limit reached")

    new = reclassify(rules, ctx.classification, chain)
    if new.exception_id != ctx.classification.exception_id:
        pattern, source = select_pattern(new.exception_id)
        log.append(
            EventKind.RECLASSIFIED,
            thread_id=thread,
            mission_id=mission,
            phase=new.phase,
            payload={
                "prior": ctx.classification.to_dict(),
                "classification": new.to_dict(),
                "chain": chain.to_dict(),
                "symptom_seq": ctx.symptom_seq,
                "depth": depth + 1,
            },
        )
        return EscalationDecision(
            kind=DecisionKind.RECLASSIFIED,
            depth=depth + 1,
            classification=new,
            pattern=pattern,
            pattern_source=source,
            chain=chain,
        )

    sink = config.sinks[config.default_sink]
    record = {
        "timestamp": log.now,
        "thread_id": thread,
        "classification": ctx.classification.to_dict(),
        "chain": chain.to_dict(),
        "payload": {
            "signal": ctx.signal.to_dict(),
            "pattern_id": ctx.pattern.pattern_id,
            "log_excerpt": _log_excerpt(events, chain),
        },
    }
    sink.deliver(record)
    decision = route(DecisionKind.EXTERNAL_SINK, sink_id=sink.sink_id, reason="no reclassification")
    return replace(decision, payload=record)


def _decision_fields(extra: Mapping[str, Any]) -> dict:
    return {k: v for k, v in extra.items() if k in ("sink_id", "reason")}
