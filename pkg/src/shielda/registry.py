"""Handler pattern registry.

A handler pattern is a triad: one local handling mechanism, one flow control
decision and one state recovery action.  The registry is static data: the
48 shipped patterns, a default mapping from exception id to pattern id, and a
fallback pattern for anything the mapping does not cover.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from typing import IO, Mapping

from shielda.classifier import UNCLASSIFIED
from shielda.errors import IntegrityError, InvalidTriadError, ParseError
from shielda.taxonomy import Taxonomy

PATTERN_ID_RE = re.compile(r"^P\d{3}$")


class LocalHandlingMechanism(Enum):
    # value: (number, name, description)
    CLARIFY_PROMPT = (1, "Clarify Prompt", "Ask the user to disambiguate the request.")
    ECHO_VALIDATION = (2, "Echo Validation", "Restate the goal back and confirm it before acting.")
    CONTEXT_TAGGING = (3, "Context Tagging", "Mark context fragments with their source.")
    DEFAULT_INTERPRETATION = (4, "Default Interpretation", "Fall back to a default reading of unclear input.")
    DISENTANGLED_PROMPTING = (5, "Disentangled Prompting", "Keep memory, context and KB inputs on separate channels.")
    PROMPT_REWRITING = (6, "Prompt Rewriting", "Regenerate the prompt in an improved form.")
    PROMPT_SANITIZATION = (7, "Prompt Sanitization", "Strip injected or redundant prompt content.")
    GRAPH_VALIDATION = (8, "Graph Validation", "Check the reasoning chain as a graph for structural defects.")
    KB_TRUST_SCORING = (9, "KB Trust Scoring", "Weight knowledge by trust and drop low-trust entries.")
    LOGIC_RERANKING = (10, "Logic Re-ranking", "Rank alternative reasoning paths and keep the best.")
    RECURSIVE_CHECKPOINTING = (11, "Recursive Checkpointing", "Insert progress checks that break reasoning loops.")
    ABORT_TASK_CHAIN = (12, "Abort Task Chain", "Stop a task chain that cannot be salvaged.")
    CONFLICT_RESOLUTION = (13, "Conflict Resolution", "Settle inter-agent conflicts by rule or confirmation.")
    CONSTRAINT_PRUNING = (14, "Constraint Pruning", "Drop constraints that cannot jointly be satisfied.")
    FORWARD_CHAINING = (15, "Forward Chaining", "Check feasibility ahead of executing the task.")
    PEER_CONFIRMATION = (16, "Peer Confirmation", "Confirm shared state with collaborating agents.")
    PLAN_REPAIR = (17, "Plan Repair", "Regenerate a broken plan under corrective constraints.")
    PLAN_SHORTENING = (18, "Plan Shortening", "Collapse an overlong plan.")
    ROLE_BASED_CHECK = (19, "Role-based Check", "Verify an agent is entitled to its assigned role.")
    SUBGOAL_REORDERING = (20, "Subgoal Reordering", "Reorder subtasks to satisfy dependencies.")
    ATTRIBUTE_FILTERING = (21, "Attribute Filtering", "Filter recalled memory by task attributes.")
    ESCALATE_UI_FAILURE = (22, "Escalate UI Failure", "Hand an unresolved UI failure to a human.")
    EXTERNAL_CALL_TIMEOUT = (23, "External Call Timeout", "Take the fallback path when an external call times out.")
    FALLBACK = (24, "Fallback", "Emit a default template when output structure is broken.")
    FALLBACK_TO_ALTERNATE_API = (25, "Fallback to Alternate API", "Send the request to a secondary endpoint.")
    LOW_CONFIDENCE_FILTER = (26, "Low-confidence Filter", "Discard or demote low-confidence outputs.")
    MEMORY_SLOT_ISOLATION = (27, "Memory Slot Isolation", "Quarantine a faulty memory slot.")
    ORACLE_VERIFICATION = (28, "Oracle Verification", "Judge outputs with rule-based verifiers.")
    OUTPUT_SANITIZATION = (29, "Output Sanitization", "Remove unsafe segments from generated output.")
    OUTPUT_TRUNCATION = (30, "Output Truncation", "Trim content that overflows the token budget.")
    PROTOCOL_DOWNGRADE = (31, "Protocol Downgrade", "Retry using an older compatible protocol.")
    RESET_MEMORY = (32, "Reset Memory", "Clear corrupted memory entries.")
    RESPONSE_NORMALIZATION = (33, "Response Normalization", "Coerce an API response into canonical shape.")
    RETRY_WITH_BACKOFF = (34, "Retry with Backoff", "Reissue the call with geometrically growing delays.")
    SAMPLING_ADJUSTMENT = (35, "Sampling Adjustment", "Change decoding parameters and resample.")
    SCHEMA_VALIDATION = (36, "Schema Validation", "Check output against its required schema.")
    SEMANTIC_CONSTRAINT_CHECKING = (37, "Semantic Constraint Checking", "Check output against semantic rules.")
    SWITCH_TOOL = (38, "Switch Tool", "Swap the failing tool for a configured backup.")
    TIMEOUT_ESCALATION = (39, "Timeout Escalation", "Escalate when a tool or API times out.")
    ESCALATE_TO_HUMAN = (40, "Escalate to Human", "Route the exception to a human supervisor.")

    @property
    def number(self) -> int:
        return self.value[0]

    @property
    def label(self) -> str:
        return self.value[1]

    @property
    def description(self) -> str:
        return self.value[2]


# Names the pattern table uses for four mechanisms that the mechanism table
# lists under a shorter name.
MECHANISM_ALIASES: dict[str, LocalHandlingMechanism] = {
    "Forward Checking": LocalHandlingMechanism.FORWARD_CHAINING,
    "Fallback Template": LocalHandlingMechanism.FALLBACK,
    "External Call Timeout Fallback": LocalHandlingMechanism.EXTERNAL_CALL_TIMEOUT,
    "Conflict Resolution Prompt": LocalHandlingMechanism.CONFLICT_RESOLUTION,
}

_MECHANISMS_BY_NAME: dict[str, LocalHandlingMechanism] = {
    **{m.label: m for m in LocalHandlingMechanism},
    **MECHANISM_ALIASES,
}


class FlowControlDecision(str, Enum):
    CONTINUE = "Continue"
    SKIP = "Skip"
    ABORT = "Abort"


class StateRecoveryAction(str, Enum):
    NO_OP = "No-op"
    ROLLBACK = "Rollback"
    COMPENSATE = "Compensate"


def mechanism_by_name(name: str) -> LocalHandlingMechanism | None:
    return _MECHANISMS_BY_NAME.get(name)


@dataclass(frozen=True)
class HandlerPattern:
    pattern_id: str
    local: LocalHandlingMechanism
    flow: FlowControlDecision
    recovery: StateRecoveryAction
    # spelling used by the pattern table, which can be an alias of local.label
    local_label: str = ""

    def __post_init__(self) -> None:
        if not self.local_label:
            object.__setattr__(self, "local_label", self.local.label)

    @property
    def triad(self) -> tuple[LocalHandlingMechanism, FlowControlDecision, StateRecoveryAction]:
        return (self.local, self.flow, self.recovery)

    def to_dict(self) -> dict:
        return {
            "id": self.pattern_id,
            "local": self.local_label,
            "flow": self.flow.value,
            "recovery": self.recovery.value,
        }


def validate_pattern(
    local: str, flow: str, recovery: str, pattern_id: str = ""
) -> HandlerPattern:
    """Build a pattern from component names, rejecting anything off-enumeration."""
    mechanism = mechanism_by_name(local)
    if mechanism is None:
        raise InvalidTriadError("local", local)
    try:
        flow_decision = FlowControlDecision(flow)
    except ValueError:
        raise InvalidTriadError("flow", flow) from None
    try:
        recovery_action = StateRecoveryAction(recovery)
    except ValueError:
        raise InvalidTriadError("recovery", recovery) from None
    return HandlerPattern(pattern_id, mechanism, flow_decision, recovery_action, local_label=local)


def all_triads() -> list[tuple[LocalHandlingMechanism, FlowControlDecision, StateRecoveryAction]]:
    return [
        (m, f, r)
        for m in LocalHandlingMechanism
        for f in FlowControlDecision
        for r in StateRecoveryAction
    ]


@dataclass(frozen=True)
class PatternRegistry:
    patterns: Mapping[str, HandlerPattern]
    mapping: Mapping[str, str]
    default_pattern: str
    notes: Mapping[str, str] | None = None

    def __post_init__(self) -> None:
        for exc_id, pid in self.mapping.items():
            if pid not in self.patterns:
                raise IntegrityError(f"mapping {exc_id!r} -> {pid!r}: no such pattern")
        if self.default_pattern not in self.patterns:
            raise IntegrityError(f"default pattern {self.default_pattern!r} does not exist")

    def __len__(self) -> int:
        return len(self.patterns)

    def get(self, pattern_id: str) -> HandlerPattern | None:
        return self.patterns.get(pattern_id)

    def resolve(self, exception_id: str) -> HandlerPattern:
        return self.patterns[self.mapping.get(exception_id, self.default_pattern)]

    def to_dict(self) -> dict:
        out = {
            "patterns": [p.to_dict() for p in self.patterns.values()],
            "mapping": dict(self.mapping),
            "default": self.default_pattern,
        }
        if self.notes:
            out["notes"] = dict(self.notes)
        return out


def resolve(registry: PatternRegistry, exception_id: str) -> HandlerPattern:
    return registry.resolve(exception_id)


def registry_from_dict(doc: object, taxonomy: Taxonomy | None = None) -> PatternRegistry:
    if not isinstance(doc, dict):
        raise ParseError("registry document must be an object")
    raw_patterns = doc.get("patterns")
    if not isinstance(raw_patterns, list):
        raise ParseError("registry needs a 'patterns' list")
    patterns: dict[str, HandlerPattern] = {}
    for i, raw in enumerate(raw_patterns):
        try:
            pid, local, flow, recovery = raw["id"], raw["local"], raw["flow"], raw["recovery"]
        except (KeyError, TypeError):
            raise ParseError(f"pattern #{i} needs id, local, flow and recovery") from None
        if not isinstance(pid, str) or not PATTERN_ID_RE.match(pid):
            raise IntegrityError(f"pattern #{i}: bad pattern id {pid!r}")
        if pid in patterns:
            raise IntegrityError(f"duplicate pattern id {pid!r}")
        try:
            patterns[pid] = validate_pattern(local, flow, recovery, pattern_id=pid)
        except InvalidTriadError as exc:
            raise IntegrityError(f"pattern {pid}: {exc}") from exc
    mapping = doc.get("mapping", {})
    if not isinstance(mapping, dict):
        raise ParseError("'mapping' must be an object")
    if taxonomy is not None:
        for exc_id in mapping:
            if exc_id != UNCLASSIFIED and exc_id not in taxonomy:
                raise IntegrityError(f"mapping key {exc_id!r} is not a taxonomy id")
    default = doc.get("default")
    if not isinstance(default, str):
        raise ParseError("registry needs a 'default' pattern id")
    notes = doc.get("notes")
    return PatternRegistry(patterns=patterns, mapping=dict(mapping), default_pattern=default, notes=notes)


def load_registry(source: IO, taxonomy: Taxonomy | None = None) -> PatternRegistry:
    try:
        doc = json.load(source)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"registry is not valid JSON: {exc}") from exc
    return registry_from_dict(doc, taxonomy)


def dump_registry(registry: PatternRegistry) -> str:
    return json.dumps(registry.to_dict(), indent=2) + "\n"


def select_pattern(
    registry: PatternRegistry, overrides: Mapping[str, str], exception_id: str
) -> tuple[HandlerPattern, str]:
    """Pattern for an exception plus where it came from: ``override`` or ``registry``."""
    override = overrides.get(exception_id)
    if override is not None:
        pattern = registry.get(override)
        if pattern is None:
            raise IntegrityError(f"override {exception_id!r} -> {override!r}: no such pattern")
        return pattern, "override"
    return registry.resolve(exception_id), "registry"
