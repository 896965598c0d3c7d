"""Rule-based exception classifier.

Rules are signature matchers over a :class:`RawExceptionSignal`.  Resolution
order is fixed: higher ``priority`` wins, ties go to the rule that appears
first in the rule file.  Signals that no rule matches come back as
``Unclassified``; that is a normal result which the engine hands to the
escalation controller.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import IO, TYPE_CHECKING, Iterable, Mapping, Sequence

from shielda.errors import ParseError, UnknownTargetError
from shielda.taxonomy import ArtifactKind, Phase, Taxonomy

if TYPE_CHECKING:
    from shielda.agentops import WorkflowEvent
    from shielda.escalation import CausalChain

UNCLASSIFIED = "Unclassified"


class Origin(str, Enum):
    TOOL_CALL = "ToolCall"
    MODEL_OUTPUT = "ModelOutput"
    AGENT_MESSAGE = "AgentMessage"
    EXTERNAL_SYSTEM = "ExternalSystem"
    INTERNAL = "Internal"


@dataclass(frozen=True)
class RawExceptionSignal:
    message: str
    origin: Origin = Origin.INTERNAL
    source_phase_hint: Phase | None = None
    structured_fields: Mapping[str, str] = field(default_factory=dict)
    thread_id: str = ""
    step_ref: str | None = None

    def __post_init__(self) -> None:
        if not self.message:
            raise ValueError("exception signal message must be non-empty")

    def to_dict(self) -> dict:
        return {
            "message": self.message,
            "origin": self.origin.value,
            "source_phase_hint": self.source_phase_hint.value if self.source_phase_hint else None,
            "structured_fields": dict(sorted(self.structured_fields.items())),
            "thread_id": self.thread_id,
            "step_ref": self.step_ref,
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "RawExceptionSignal":
        hint = raw.get("source_phase_hint")
        return cls(
            message=raw["message"],
            origin=Origin(raw.get("origin", Origin.INTERNAL.value)),
            source_phase_hint=Phase(hint) if hint else None,
            structured_fields={str(k): str(v) for k, v in raw.get("structured_fields", {}).items()},
            thread_id=raw.get("thread_id", ""),
            step_ref=raw.get("step_ref"),
        )


@dataclass(frozen=True)
class Classification:
    exception_id: str
    phase: Phase
    artifact: ArtifactKind | None = None
    matched_rule: str | None = None
    evidence: tuple[str, ...] = ()

    @property
    def is_classified(self) -> bool:
        return self.exception_id != UNCLASSIFIED

    def to_dict(self) -> dict:
        return {
            "exception_id": self.exception_id,
            "phase": self.phase.value,
            "artifact": self.artifact.value if self.artifact else None,
            "matched_rule": self.matched_rule,
            "evidence": list(self.evidence),
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "Classification":
        artifact = raw.get("artifact")
        return cls(
            exception_id=raw["exception_id"],
            phase=Phase(raw["phase"]),
            artifact=ArtifactKind(artifact) if artifact else None,
            matched_rule=raw.get("matched_rule"),
            evidence=tuple(raw.get("evidence", ())),
        )


@dataclass(frozen=True)
class RuleMatch:
    """Conjunction of predicates; every supplied predicate must hold."""

    message_substring: str | None = None
    message_regex: re.Pattern | None = None
    fields: Mapping[str, str] = field(default_factory=dict)
    origin: tuple[Origin, ...] = ()

    def evidence_for(self, signal: RawExceptionSignal) -> list[str] | None:
        """Return the matched fragments, or None when the signal does not match."""
        evidence: list[str] = []
        if self.origin:
            if signal.origin not in self.origin:
                return None
            evidence.append(f"origin={signal.origin.value}")
        for key, expected in self.fields.items():
            if signal.structured_fields.get(key) != expected:
                return None
            evidence.append(f"{key}={expected}")
        if self.message_substring is not None:
            at = signal.message.lower().find(self.message_substring.lower())
            if at < 0:
                return None
            evidence.append(signal.message[at : at + len(self.message_substring)])
        if self.message_regex is not None:
            m = self.message_regex.search(signal.message)
            if m is None:
                return None
            evidence.append(m.group(0))
        return evidence

    def to_dict(self) -> dict:
        out: dict = {}
        if self.message_substring is not None:
            out["message_substring"] = self.message_substring
        if self.message_regex is not None:
            out["message_regex"] = self.message_regex.pattern
        if self.fields:
            out["fields"] = dict(self.fields)
        if self.origin:
            out["origin"] = [o.value for o in self.origin]
        return out


@dataclass(frozen=True)
class ClassificationRule:
    rule_id: str
    priority: int
    match: RuleMatch
    target: str
    aliases: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        out = {
            "rule_id": self.rule_id,
            "priority": self.priority,
            "match": self.match.to_dict(),
            "target": self.target,
        }
        if self.aliases:
            out["aliases"] = list(self.aliases)
        return out


def resolve_phase(entry_phase: Phase, hint: Phase | None) -> Phase:
    if entry_phase is not Phase.BOTH:
        return entry_phase
    if hint is not None and hint is not Phase.BOTH:
        return hint
    return Phase.EXECUTION


class RuleSet:
    """Validated, priority-ordered classification rules bound to a taxonomy."""

    def __init__(self, rules: Iterable[ClassificationRule], taxonomy: Taxonomy):
        rules = list(rules)
        seen: set[str] = set()
        for rule in rules:
            if rule.rule_id in seen:
                raise ParseError(f"duplicate rule_id {rule.rule_id!r}")
            seen.add(rule.rule_id)
            if rule.target not in taxonomy:
                raise UnknownTargetError(
                    f"rule {rule.rule_id!r} targets unknown exception id {rule.target!r}"
                )
        # file order is preserved as the tie-breaker because sorted() is stable
        self.file_order: tuple[ClassificationRule, ...] = tuple(rules)
        self.rules: tuple[ClassificationRule, ...] = tuple(
            sorted(rules, key=lambda r: -r.priority)
        )
        self.taxonomy = taxonomy

    def __len__(self) -> int:
        return len(self.rules)

    @property
    def targets(self) -> set[str]:
        return {r.target for r in self.rules}

    def alias_target(self, name: str) -> str | None:
        for rule in self.rules:
            if name in rule.aliases:
                return rule.target
        return None

    def classify(
        self, signal: RawExceptionSignal, restrict_phases: Sequence[Phase] | None = None
    ) -> Classification:
        for rule in self.rules:
            entry = self.taxonomy.lookup(rule.target)
            assert entry is not None
            if restrict_phases is not None and entry.phase not in restrict_phases:
                continue
            evidence = rule.match.evidence_for(signal)
            if evidence is None:
                continue
            return Classification(
                exception_id=entry.id,
                phase=resolve_phase(entry.phase, signal.source_phase_hint),
                artifact=entry.artifact,
                matched_rule=rule.rule_id,
                evidence=tuple(evidence),
            )
        hint = signal.source_phase_hint
        return Classification(
            exception_id=UNCLASSIFIED,
            phase=hint if hint is not None and hint is not Phase.BOTH else Phase.EXECUTION,
        )

    def to_list(self) -> list[dict]:
        return [r.to_dict() for r in self.file_order]


def _compile_match(raw: object, rule_id: str) -> RuleMatch:
    if not isinstance(raw, dict):
        raise ParseError(f"rule {rule_id!r}: 'match' must be an object")
    unknown = set(raw) - {"message_substring", "message_regex", "fields", "origin"}
    if unknown:
        raise ParseError(f"rule {rule_id!r}: unknown match keys {sorted(unknown)}")
    regex = None
    if raw.get("message_regex") is not None:
        try:
            regex = re.compile(raw["message_regex"])
        except re.error as exc:
            raise ParseError(f"rule {rule_id!r}: bad regex: {exc}") from exc
    origin_raw = raw.get("origin", [])
    if isinstance(origin_raw, str):
        origin_raw = [origin_raw]
    try:
        origin = tuple(Origin(o) for o in origin_raw)
    except ValueError as exc:
        raise ParseError(f"rule {rule_id!r}: {exc}") from exc
    fields = raw.get("fields", {})
    if not isinstance(fields, dict):
        raise ParseError(f"rule {rule_id!r}: 'fields' must be an object")
    match = RuleMatch(
        message_substring=raw.get("message_substring"),
        message_regex=regex,
        fields={str(k): str(v) for k, v in fields.items()},
        origin=origin,
    )
    if match == RuleMatch():
        raise ParseError(f"rule {rule_id!r}: empty match would catch every signal")
    return match


def rules_from_list(doc: object, taxonomy: Taxonomy) -> RuleSet:
    if isinstance(doc, dict) and "rules" in doc:
        doc = doc["rules"]
    if not isinstance(doc, list):
        raise ParseError("rule document must be a list of rules")
    rules = []
    for i, raw in enumerate(doc):
        if not isinstance(raw, dict):
            raise ParseError(f"rule #{i} is not an object")
        try:
            rule_id = str(raw["rule_id"])
            priority = raw["priority"]
            target = raw["target"]
        except KeyError as exc:
            raise ParseError(f"rule #{i} missing field {exc.args[0]!r}") from None
        if not isinstance(priority, int) or isinstance(priority, bool):
            raise ParseError(f"rule {rule_id!r}: priority must be an integer")
        rules.append(
            ClassificationRule(
                rule_id=rule_id,
                priority=priority,
                match=_compile_match(raw.get("match"), rule_id),
                target=target,
                aliases=tuple(raw.get("aliases", ())),
            )
        )
    return RuleSet(rules, taxonomy)


def load_rules(source: IO, taxonomy: Taxonomy) -> RuleSet:
    try:
        doc = json.load(source)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"rule file is not valid JSON: {exc}") from exc
    return rules_from_list(doc, taxonomy)


def dump_rules(rules: RuleSet) -> str:
    return json.dumps({"rules": rules.to_list()}, indent=2) + "\n"


def rules_from_hints(taxonomy: Taxonomy, priority: int = 0) -> RuleSet:
    """Low-priority substring rules seeded from each entry's ``match_hints``."""
    rules = [
        ClassificationRule(
            rule_id=f"hint.{entry.id}.{n}",
            priority=priority,
            match=RuleMatch(message_substring=hint),
            target=entry.id,
        )
        for entry in taxonomy
        for n, hint in enumerate(entry.match_hints)
    ]
    return RuleSet(rules, taxonomy)


def classify(rules: RuleSet, signal: RawExceptionSignal) -> Classification:
    return rules.classify(signal)


def signal_from_event(event: "WorkflowEvent") -> RawExceptionSignal:
    """Render a logged event as a classifiable signal.

    ``ExceptionRaised`` events give back their recorded signal.  Any other
    event is described by its summary text plus ``event_kind`` / ``action``
    fields, which is what the reclassification rules key on.
    """
    payload = event.payload
    if event.kind.value == "ExceptionRaised" and "signal" in payload:
        return RawExceptionSignal.from_dict(payload["signal"])
    fields = {"event_kind": event.kind.value}
    if "action" in payload:
        fields["action"] = str(payload["action"])
    text = payload.get("summary") or payload.get("message") or event.kind.value
    return RawExceptionSignal(
        message=str(text),
        origin=Origin.INTERNAL,
        source_phase_hint=event.phase,
        structured_fields=fields,
        thread_id=event.thread_id,
        step_ref=payload.get("step_id"),
    )


_ROOT_PHASES = (Phase.REASONING_PLANNING, Phase.BOTH)


def reclassify(rules: RuleSet, prior: Classification, evidence: "CausalChain") -> Classification:
    """Classify the root of a causal chain instead of the observed symptom.

    Returns ``prior`` when the chain never left the symptom or when no rule
    recognises the root event.
    """
    if len(evidence.links) <= 1:
        return prior
    root = evidence.root
    signal = signal_from_event(root)
    restrict = _ROOT_PHASES if root.phase is Phase.REASONING_PLANNING else None
    result = rules.classify(signal, restrict_phases=restrict)
    if not result.is_classified:
        return prior
    return replace(result, evidence=result.evidence + (f"root_seq={root.seq}",))
