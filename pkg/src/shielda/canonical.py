"""Locate and load the shipped taxonomy, rule and registry files.

The directory defaults to the package's ``data/`` folder and can be pointed
elsewhere with the ``SHIELDA_DATA_DIR`` environment variable.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from shielda.classifier import RuleSet, load_rules
from shielda.registry import PatternRegistry, load_registry
from shielda.taxonomy import Taxonomy, load_taxonomy

PACKAGE_DATA_DIR = Path(__file__).resolve().parent / "data"
ENV_VAR = "SHIELDA_DATA_DIR"

TAXONOMY_FILE = "taxonomy.json"
RULES_FILE = "rules.json"
REGISTRY_FILE = "registry.json"


def data_dir(override: str | Path | None = None) -> Path:
    if override is not None:
        return Path(override)
    env = os.environ.get(ENV_VAR)
    return Path(env) if env else PACKAGE_DATA_DIR


@dataclass(frozen=True)
class CanonicalData:
    taxonomy: Taxonomy
    rules: RuleSet
    registry: PatternRegistry
    source: Path


_cache: dict[Path, CanonicalData] = {}


def load_canonical(directory: str | Path | None = None) -> CanonicalData:
    """Load and cross-validate all three documents; results are cached per directory."""
    root = data_dir(directory).resolve()
    if root not in _cache:
        with open(root / TAXONOMY_FILE, "rb") as fh:
            taxonomy = load_taxonomy(fh)
        with open(root / RULES_FILE, "rb") as fh:
            rules = load_rules(fh, taxonomy)
        with open(root / REGISTRY_FILE, "rb") as fh:
            registry = load_registry(fh, taxonomy)
        _cache[root] = CanonicalData(taxonomy, rules, registry, root)
    return _cache[root]
