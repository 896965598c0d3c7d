"""Exception taxonomy: 36 exception types grouped under 12 agent artifacts.

The canonical document ships at ``data/taxonomy.json``.  Each entry is keyed
by a stable dotted id (``artifact.short_name``) so that display names can be
edited without breaking rule files, registry mappings or recorded logs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Iterable

from shielda.errors import IntegrityError, ParseError

CANONICAL_ENTRY_COUNT = 36
CANONICAL_ARTIFACT_COUNT = 12


class Phase(str, Enum):
    REASONING_PLANNING = "RP"
    EXECUTION = "E"
    BOTH = "RP/E"

    def matches(self, wanted: "Phase") -> bool:
        """True if an entry labelled ``self`` belongs under a ``wanted`` filter."""
        if wanted is Phase.BOTH:
            return self is Phase.BOTH
        return self is wanted or self is Phase.BOTH


class ArtifactKind(str, Enum):
    GOAL = "Goal"
    CONTEXT = "Context"
    REASONING = "Reasoning"
    PLANNING = "Planning"
    MEMORY = "Memory"
    KNOWLEDGE_BASE = "KnowledgeBase"
    MODEL = "Model"
    TOOL = "Tool"
    INTERFACE = "Interface"
    TASK_FLOW = "TaskFlow"
    OTHER_AGENT = "OtherAgent"
    EXTERNAL_SYSTEM = "ExternalSystem"


@dataclass(frozen=True)
class ExceptionTypeEntry:
    id: str
    display_name: str
    artifact: ArtifactKind
    phase: Phase
    description: str = ""
    match_hints: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "display_name": self.display_name,
            "artifact": self.artifact.value,
            "phase": self.phase.value,
            "description": self.description,
            "match_hints": list(self.match_hints),
        }


@dataclass(frozen=True)
class Taxonomy:
    entries: tuple[ExceptionTypeEntry, ...]
    canonical: bool = False
    _by_id: dict[str, ExceptionTypeEntry] = field(init=False, repr=False, compare=False)
    _by_artifact: dict[ArtifactKind, tuple[ExceptionTypeEntry, ...]] = field(
        init=False, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        by_id: dict[str, ExceptionTypeEntry] = {}
        by_artifact: dict[ArtifactKind, list[ExceptionTypeEntry]] = {}
        for entry in self.entries:
            if entry.id in by_id:
                raise IntegrityError(f"duplicate exception id {entry.id!r}")
            by_id[entry.id] = entry
            by_artifact.setdefault(entry.artifact, []).append(entry)
        object.__setattr__(self, "_by_id", by_id)
        object.__setattr__(
            self, "_by_artifact", {k: tuple(v) for k, v in by_artifact.items()}
        )

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, exception_id: object) -> bool:
        return exception_id in self._by_id

    def __iter__(self):
        return iter(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    @property
    def artifacts(self) -> set[ArtifactKind]:
        return set(self._by_artifact)

    def lookup(self, exception_id: str) -> ExceptionTypeEntry | None:
        return self._by_id.get(exception_id)

    def query(
        self, phase: Phase | None = None, artifact: ArtifactKind | None = None
    ) -> list[ExceptionTypeEntry]:
        """Entries matching every supplied filter, in document order.

        ``RP/E`` entries satisfy both the ``RP`` and the ``E`` phase filters.
        """
        pool: Iterable[ExceptionTypeEntry]
        pool = self._by_artifact.get(artifact, ()) if artifact is not None else self.entries
        if phase is None:
            return list(pool)
        return [e for e in pool if e.phase.matches(phase)]

    def to_dict(self) -> dict:
        return {"canonical": self.canonical, "entries": [e.to_dict() for e in self.entries]}


def lookup(taxonomy: Taxonomy, exception_id: str) -> ExceptionTypeEntry | None:
    return taxonomy.lookup(exception_id)


def query(
    taxonomy: Taxonomy, phase: Phase | None = None, artifact: ArtifactKind | None = None
) -> list[ExceptionTypeEntry]:
    return taxonomy.query(phase=phase, artifact=artifact)


def _entry_from_dict(raw: dict, index: int) -> ExceptionTypeEntry:
    if not isinstance(raw, dict):
        raise ParseError(f"entry #{index} is not an object")
    try:
        entry_id = raw["id"]
        display_name = raw["display_name"]
        artifact_raw = raw["artifact"]
        phase_raw = raw["phase"]
    except KeyError as exc:
        raise ParseError(f"entry #{index} missing field {exc.args[0]!r}") from None
    if not isinstance(entry_id, str) or not entry_id:
        raise ParseError(f"entry #{index} has an empty id")
    try:
        artifact = ArtifactKind(artifact_raw)
    except ValueError:
        raise IntegrityError(f"entry {entry_id!r}: unknown artifact {artifact_raw!r}") from None
    try:
        phase = Phase(phase_raw)
    except ValueError:
        raise IntegrityError(f"entry {entry_id!r}: unknown phase {phase_raw!r}") from None
    hints = raw.get("match_hints", [])
    if not isinstance(hints, list) or not all(isinstance(h, str) for h in hints):
        raise ParseError(f"entry {entry_id!r}: match_hints must be a list of strings")
    return ExceptionTypeEntry(
        id=entry_id,
        display_name=display_name,
        artifact=artifact,
        phase=phase,
        description=raw.get("description", ""),
        match_hints=tuple(hints),
    )


def taxonomy_from_dict(doc: object) -> Taxonomy:
    if not isinstance(doc, dict) or not isinstance(doc.get("entries"), list):
        raise ParseError("taxonomy document needs an 'entries' list")
    canonical = doc.get("canonical", False)
    if not isinstance(canonical, bool):
        raise ParseError("'canonical' must be a boolean")
    entries = tuple(_entry_from_dict(raw, i) for i, raw in enumerate(doc["entries"]))
    taxonomy = Taxonomy(entries=entries, canonical=canonical)
    if canonical:
        if len(entries) != CANONICAL_ENTRY_COUNT:
            raise IntegrityError(
                f"canonical taxonomy must hold {CANONICAL_ENTRY_COUNT} entries, got {len(entries)}"
            )
        if len(taxonomy.artifacts) != CANONICAL_ARTIFACT_COUNT:
            raise IntegrityError(
                f"canonical taxonomy must span {CANONICAL_ARTIFACT_COUNT} artifacts, "
                f"got {len(taxonomy.artifacts)}"
            )
    return taxonomy


def load_taxonomy(source: IO) -> Taxonomy:
    """Parse and validate a taxonomy document from a text or byte stream."""
    try:
        doc = json.load(source)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"taxonomy is not valid JSON: {exc}") from exc
    return taxonomy_from_dict(doc)


def dump_taxonomy(taxonomy: Taxonomy) -> str:
    return json.dumps(taxonomy.to_dict(), indent=2) + "\n"
