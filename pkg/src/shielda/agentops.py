"""AgentOps infrastructure: append-only event log and checkpoint store.

Events are written as JSON Lines with sorted keys, one event per line, and
flushed on every append.  Time is a logical clock owned by the log, so two
runs with the same inputs produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import IO, Any, Iterable, Mapping, Sequence

from shielda.entities import DEFAULT_EXTRACTORS, EntityRef, Extractor, extract_entities
from shielda.errors import LogFull, MalformedLog, UnknownCheckpoint
from shielda.taxonomy import ArtifactKind, Phase


class EventKind(str, Enum):
    GOAL_INGESTED = "GoalIngested"
    PLAN_GENERATED = "PlanGenerated"
    PLAN_STEP_STARTED = "PlanStepStarted"
    TOOL_INVOKED = "ToolInvoked"
    SIDE_EFFECT_RECORDED = "SideEffectRecorded"
    EXCEPTION_RAISED = "ExceptionRaised"
    CLASSIFIED = "Classified"
    PATTERN_SELECTED = "PatternSelected"
    LOCAL_ATTEMPT = "LocalAttempt"
    FLOW_APPLIED = "FlowApplied"
    RECOVERY_APPLIED = "RecoveryApplied"
    ESCALATION_STARTED = "EscalationStarted"
    RECLASSIFIED = "Reclassified"
    ESCALATION_ROUTED = "EscalationRouted"
    DIRECTIVE_ISSUED = "DirectiveIssued"
    THREAD_ABORTED = "ThreadAborted"
    STEP_SKIPPED = "StepSkipped"
    MISSION_COMPLETED = "MissionCompleted"
    MISSION_TERMINATED = "MissionTerminated"
    CHECKPOINT_TAKEN = "CheckpointTaken"


REQUIRED_PAYLOAD_KEYS: dict[EventKind, tuple[str, ...]] = {
    EventKind.GOAL_INGESTED: ("goal",),
    EventKind.PLAN_GENERATED: ("plan_id", "steps"),
    EventKind.PLAN_STEP_STARTED: ("step_id", "action"),
    EventKind.TOOL_INVOKED: ("tool",),
    EventKind.SIDE_EFFECT_RECORDED: ("effect",),
    EventKind.EXCEPTION_RAISED: ("signal",),
    EventKind.CLASSIFIED: ("classification", "exception_seq"),
    EventKind.PATTERN_SELECTED: ("pattern_id", "exception_id", "source"),
    EventKind.LOCAL_ATTEMPT: ("attempt", "mechanism", "result"),
    EventKind.FLOW_APPLIED: ("decision",),
    EventKind.RECOVERY_APPLIED: ("action",),
    EventKind.ESCALATION_STARTED: ("depth", "symptom_seq"),
    EventKind.RECLASSIFIED: ("prior", "classification", "chain", "symptom_seq"),
    EventKind.ESCALATION_ROUTED: ("decision", "depth"),
    EventKind.DIRECTIVE_ISSUED: ("directive",),
    EventKind.THREAD_ABORTED: ("reason",),
    EventKind.STEP_SKIPPED: ("step_id",),
    EventKind.MISSION_COMPLETED: (),
    EventKind.MISSION_TERMINATED: ("reason",),
    EventKind.CHECKPOINT_TAKEN: ("checkpoint_id", "scope", "digest"),
}

# payload keys whose text is scanned for entities at append time
_TEXT_KEYS = ("goal", "summary", "message", "text")


@dataclass(frozen=True)
class WorkflowEvent:
    seq: int
    logical_time: int
    thread_id: str
    mission_id: str
    phase: Phase
    kind: EventKind
    payload: Mapping[str, Any] = field(default_factory=dict)
    entities: frozenset[EntityRef] = frozenset()

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "logical_time": self.logical_time,
            "thread_id": self.thread_id,
            "mission_id": self.mission_id,
            "phase": self.phase.value,
            "kind": self.kind.value,
            "payload": self.payload,
            "entities": [e.to_dict() for e in sorted(self.entities)],
        }

    def to_json(self) -> str:
        # ASCII escapes keep every record on one physical line whatever the payload holds
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, raw: Mapping) -> "WorkflowEvent":
        try:
            kind = EventKind(raw["kind"])
            event = cls(
                seq=int(raw["seq"]),
                logical_time=int(raw["logical_time"]),
                thread_id=str(raw["thread_id"]),
                mission_id=str(raw["mission_id"]),
                phase=Phase(raw["phase"]),
                kind=kind,
                payload=raw.get("payload", {}),
                entities=frozenset(EntityRef.from_dict(e) for e in raw.get("entities", [])),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise MalformedLog(f"bad event record: {exc}") from exc
        missing = [k for k in REQUIRED_PAYLOAD_KEYS[kind] if k not in event.payload]
        if missing:
            raise MalformedLog(f"event {event.seq} ({kind.value}) lacks payload keys {missing}")
        return event


def payload_entities(
    payload: Mapping[str, Any], extractors: Sequence[Extractor] = DEFAULT_EXTRACTORS
) -> frozenset[EntityRef]:
    found: set[EntityRef] = set()
    for key in _TEXT_KEYS:
        text = payload.get(key)
        if isinstance(text, str):
            found |= extract_entities(text, extractors)
    signal = payload.get("signal")
    if isinstance(signal, Mapping) and isinstance(signal.get("message"), str):
        found |= extract_entities(signal["message"], extractors)
    return frozenset(found)


class EventLog:
    """Single-writer, append-only event log with an optional JSONL mirror."""

    def __init__(
        self,
        path: str | Path | None = None,
        extractors: Sequence[Extractor] = DEFAULT_EXTRACTORS,
        capacity: int | None = None,
    ):
        self.path = Path(path) if path is not None else None
        # appends beyond this many events raise LogFull; None means unbounded
        self.capacity = capacity
        self.extractors = tuple(extractors)
        self._events: list[WorkflowEvent] = []
        self._lock = threading.Lock()
        self._time = 0
        self._fh: IO[str] | None = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "w", encoding="utf-8")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self) -> "EventLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __len__(self) -> int:
        return len(self._events)

    @property
    def now(self) -> int:
        return self._time

    def advance(self, ticks: int) -> None:
        """Move the logical clock forward, e.g. by a backoff delay."""
        if ticks < 0:
            raise ValueError("logical time cannot run backwards")
        with self._lock:
            self._time += ticks

    def append(
        self,
        kind: EventKind,
        *,
        thread_id: str,
        mission_id: str,
        phase: Phase,
        payload: Mapping[str, Any] | None = None,
        entities: Iterable[EntityRef] = (),
    ) -> int:
        payload = dict(payload or {})
        missing = [k for k in REQUIRED_PAYLOAD_KEYS[kind] if k not in payload]
        if missing:
            raise ValueError(f"{kind.value} event needs payload keys {missing}")
        all_entities = frozenset(entities) | payload_entities(payload, self.extractors)
        with self._lock:
            if self.capacity is not None and len(self._events) >= self.capacity:
                raise LogFull(f"event log is full at {self.capacity} events")
            self._time += 1
            event = WorkflowEvent(
                seq=len(self._events) + 1,
                logical_time=self._time,
                thread_id=thread_id,
                mission_id=mission_id,
                phase=phase,
                kind=kind,
                payload=payload,
                entities=all_entities,
            )
            # round-trip through JSON so the in-memory view equals what a reader sees
            line = event.to_json()
            event = WorkflowEvent.from_dict(json.loads(line))
            self._events.append(event)
            if self._fh is not None:
                self._fh.write(line + "\n")
                self._fh.flush()
        return event.seq

    @property
    def events(self) -> tuple[WorkflowEvent, ...]:
        with self._lock:
            return tuple(self._events)

    def get(self, seq: int) -> WorkflowEvent:
        return self._events[seq - 1]

    def snapshot(self, upto_seq: int | None = None) -> tuple[WorkflowEvent, ...]:
        events = self.events
        return events if upto_seq is None else events[:upto_seq]

    def query(self, **filters: Any) -> list[WorkflowEvent]:
        return query(self.events, **filters)

    def dumps(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.events)


def query(
    events: Sequence[WorkflowEvent],
    *,
    thread_id: str | None = None,
    kind: EventKind | None = None,
    phase: Phase | None = None,
    entity: EntityRef | None = None,
    seq_range: tuple[int, int] | None = None,
) -> list[WorkflowEvent]:
    """Events matching every supplied filter, in seq order. ``seq_range`` is inclusive."""
    out = []
    for event in events:
        if thread_id is not None and event.thread_id != thread_id:
            continue
        if kind is not None and event.kind is not kind:
            continue
        if phase is not None and not event.phase.matches(phase):
            continue
        if entity is not None and entity not in event.entities:
            continue
        if seq_range is not None and not (seq_range[0] <= event.seq <= seq_range[1]):
            continue
        out.append(event)
    return out


def parse_log(lines: Iterable[str]) -> list[WorkflowEvent]:
    events = []
    for n, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedLog(f"line {n}: {exc}") from exc
        event = WorkflowEvent.from_dict(raw)
        if event.seq != len(events) + 1:
            raise MalformedLog(f"line {n}: expected seq {len(events) + 1}, found {event.seq}")
        events.append(event)
    return events


def read_log(path: str | Path) -> list[WorkflowEvent]:
    with open(path, encoding="utf-8") as fh:
        return parse_log(fh)


def state_digest(state: Any) -> str:
    canonical = json.dumps(state, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Checkpoint:
    checkpoint_id: str
    thread_id: str
    artifact_scope: ArtifactKind
    state_digest: str
    snapshot: str


class CheckpointStore:
    def __init__(self) -> None:
        self._checkpoints: dict[str, Checkpoint] = {}
        self._order: list[str] = []

    def __len__(self) -> int:
        return len(self._checkpoints)

    def checkpoint(self, thread_id: str, scope: ArtifactKind, state: Any) -> str:
        snapshot = json.dumps(state, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        checkpoint_id = f"ckpt-{len(self._order) + 1}"
        self._checkpoints[checkpoint_id] = Checkpoint(
            checkpoint_id=checkpoint_id,
            thread_id=thread_id,
            artifact_scope=scope,
            state_digest=state_digest(state),
            snapshot=snapshot,
        )
        self._order.append(checkpoint_id)
        return checkpoint_id

    def get(self, checkpoint_id: str) -> Checkpoint:
        try:
            return self._checkpoints[checkpoint_id]
        except KeyError:
            raise UnknownCheckpoint(checkpoint_id) from None

    def restore(self, checkpoint_id: str) -> Any:
        ckpt = self.get(checkpoint_id)
        state = json.loads(ckpt.snapshot)
        if state_digest(state) != ckpt.state_digest:
            raise UnknownCheckpoint(f"{checkpoint_id}: snapshot digest mismatch")
        return state

    def latest(self, thread_id: str, scope: ArtifactKind) -> Checkpoint | None:
        for checkpoint_id in reversed(self._order):
            ckpt = self._checkpoints[checkpoint_id]
            if ckpt.thread_id == thread_id and ckpt.artifact_scope is scope:
                return ckpt
        return None
