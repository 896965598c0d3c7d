"""Entity references and the extractors that pull them out of free text.

Extractors are plain regular-expression rules.  The default set recognises
URLs, file paths, tool names introduced by the word "tool", ``@handles`` and
code-like identifiers in backticks.  Backticked plain words (```workflows```)
are deliberately ignored: they are prose emphasis, not entities.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Mapping, Sequence


class EntityKind(str, Enum):
    FILE_PATH = "FilePath"
    TOOL_NAME = "ToolName"
    AGENT_ID = "AgentId"
    URL = "Url"
    IDENTIFIER = "Identifier"


@dataclass(frozen=True, order=True)
class EntityRef:
    kind: EntityKind
    value: str

    def __post_init__(self) -> None:
        value = self.value.strip()
        if not value:
            raise ValueError("entity value must be non-empty")
        object.__setattr__(self, "value", value)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "value": self.value}

    @classmethod
    def from_dict(cls, raw: Mapping) -> "EntityRef":
        return cls(EntityKind(raw["kind"]), raw["value"])

    def __str__(self) -> str:
        return f"{self.kind.value}:{self.value}"


Extractor = Callable[[str], Iterable[EntityRef]]

_URL_RE = re.compile(r"https?://[^\s`'\"<>)\]]+")
# a path has a slash-separated segment or ends in a short file extension
_PATH_RE = re.compile(
    r"(?<![\w@/.:-])"
    r"(/?(?:[\w.-]+/)+[\w.-]*[\w]|\.?[\w-]+(?:\.[\w-]+)*\.[A-Za-z][A-Za-z0-9]{1,5})"
    r"(?![\w/])"
)
_TOOL_RE = re.compile(r"\btool\s+[`'\"]?([A-Za-z_][\w.-]*)[`'\"]?", re.IGNORECASE)
_AGENT_RE = re.compile(r"(?<![\w.])@([A-Za-z0-9][\w-]*)")
_BACKTICK_RE = re.compile(r"`([^`\s]+)`")
_CODE_IDENT_RE = re.compile(r"^[A-Za-z_][\w.:#-]*$")


def _strip_url(text: str) -> str:
    return _URL_RE.sub(" ", text)


def extract_urls(text: str) -> Iterable[EntityRef]:
    for m in _URL_RE.finditer(text):
        yield EntityRef(EntityKind.URL, m.group(0).rstrip(".,;:"))


def extract_paths(text: str) -> Iterable[EntityRef]:
    for m in _PATH_RE.finditer(_strip_url(text)):
        value = m.group(1).rstrip(".")
        if "/" in value or "." in value.lstrip("."):
            yield EntityRef(EntityKind.FILE_PATH, value)


def extract_tool_names(text: str) -> Iterable[EntityRef]:
    for m in _TOOL_RE.finditer(text):
        yield EntityRef(EntityKind.TOOL_NAME, m.group(1))


def extract_agent_ids(text: str) -> Iterable[EntityRef]:
    for m in _AGENT_RE.finditer(_strip_url(text)):
        yield EntityRef(EntityKind.AGENT_ID, "@" + m.group(1))


def extract_code_identifiers(text: str) -> Iterable[EntityRef]:
    for m in _BACKTICK_RE.finditer(text):
        token = m.group(1)
        if not _CODE_IDENT_RE.match(token) or "/" in token:
            continue
        # plain words are emphasis; require snake/dotted/namespaced/numbered form
        if not any(c in token for c in "_.:#") and not any(c.isdigit() for c in token):
            continue
        if _PATH_RE.fullmatch(token):
            continue
        yield EntityRef(EntityKind.IDENTIFIER, token)


DEFAULT_EXTRACTORS: tuple[Extractor, ...] = (
    extract_urls,
    extract_paths,
    extract_tool_names,
    extract_agent_ids,
    extract_code_identifiers,
)


def extract_entities(
    message: str, extractors: Sequence[Extractor] = DEFAULT_EXTRACTORS
) -> frozenset[EntityRef]:
    if not message:
        return frozenset()
    found: set[EntityRef] = set()
    for extractor in extractors:
        found.update(extractor(message))
    tool_values = {e.value for e in found if e.kind is EntityKind.TOOL_NAME}
    # a backticked tool name is already captured as ToolName
    return frozenset(
        e for e in found if not (e.kind is EntityKind.IDENTIFIER and e.value in tool_values)
    )
