"""Uncertain IsA knowledge store and description lookup.

Triples arrive as ``entity<TAB>concept<TAB>count`` lines where the count
is a raw frequency. Each entity serves its top-K concepts with a softmax
weight distribution; short lists are padded with ``<UNK>`` slots whose
weight is exactly zero.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ConfigError, FormatError

log = logging.getLogger(__name__)

PAD_CONCEPT = "<UNK>"
NO_DESCRIPTION = "<NO_DESP>"

CONDITIONINGS = ("log1p", "raw")


@dataclass(frozen=True)
class ConceptBundle:
    """Top-K concepts of one entity with their normalized weights."""

    concepts: tuple[str, ...]
    weights: tuple[float, ...]
    is_pad: tuple[bool, ...]

    def __len__(self) -> int:
        return len(self.concepts)


def weighting_scores(counts, is_pad, conditioning: str = "log1p") -> np.ndarray:
    """Softmax the (conditioned) counts over non-pad slots; pads get exactly 0.

    Raw frequency counts span orders of magnitude, so the default damps
    them with log(1 + count) first; ``raw`` skips the damping.
    """
    if conditioning not in CONDITIONINGS:
        raise ConfigError(f"unknown conditioning {conditioning!r}; choose from {CONDITIONINGS}")
    counts = np.asarray(counts, dtype=np.float64)
    keep = ~np.asarray(is_pad, dtype=bool)
    if counts.shape != keep.shape:
        raise ConfigError("counts and is_pad must have the same length")
    out = np.zeros_like(counts)
    if not keep.any():
        return out
    x = np.log1p(counts[keep]) if conditioning == "log1p" else counts[keep]
    e = np.exp(x - x.max())
    out[keep] = e / e.sum()
    return out


class KnowledgeStore:
    """Write-once store of (entity, concept, count) triples."""

    def __init__(self, conditioning: str = "log1p"):
        if conditioning not in CONDITIONINGS:
            raise ConfigError(f"unknown conditioning {conditioning!r}; choose from {CONDITIONINGS}")
        self.conditioning = conditioning
        self._counts: dict[str, dict[str, int]] = {}
        # Sorted views are built lazily and cached; ingestion invalidates.
        self._ranked: dict[str, list[tuple[str, int]]] = {}

    @property
    def num_entities(self) -> int:
        return len(self._counts)

    def entities(self) -> list[str]:
        return sorted(self._counts)

    def concept_vocabulary(self) -> list[str]:
        """All concept names, pad token first, rest sorted."""
        names: set[str] = set()
        for per_entity in self._counts.values():
            names.update(per_entity)
        return [PAD_CONCEPT] + sorted(names - {PAD_CONCEPT})

    def concept_counts(self, entity: str) -> dict[str, int]:
        return dict(self._counts.get(entity, {}))

    def add(self, entity: str, concept: str, count: int) -> None:
        if count < 0:
            raise FormatError(f"negative count {count} for ({entity!r}, {concept!r})")
        per_entity = self._counts.setdefault(entity, {})
        per_entity[concept] = per_entity.get(concept, 0) + int(count)
        self._ranked.pop(entity, None)

    def ingest_triples(self, source: str | Path | Iterable[str]) -> int:
        """Read TSV triples; returns the number of accepted lines.

        Malformed lines are logged and skipped; more than 10% malformed
        aborts the ingestion.
        """
        if isinstance(source, (str, Path)):
            with open(source, "r", encoding="utf-8") as fh:
                return self.ingest_triples(list(fh))
        accepted = 0
        rejected = 0
        total = 0
        for lineno, line in enumerate(source, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            total += 1
            parts = line.split("\t")
            ok = len(parts) == 3 and parts[0] != "" and parts[1] != ""
            count = -1
            if ok:
                try:
                    count = int(parts[2])
                except ValueError:
                    ok = False
            if not ok or count < 0:
                rejected += 1
                log.warning("rejected triple line %d: %r", lineno, line)
                continue
            self.add(parts[0], parts[1], count)
            accepted += 1
        if total and rejected > 0.1 * total:
            raise FormatError(
                f"{rejected} of {total} triple lines malformed (over the 10% limit)")
        return accepted

    def _ranked_concepts(self, entity: str) -> list[tuple[str, int]]:
        ranked = self._ranked.get(entity)
        if ranked is None:
            per_entity = self._counts.get(entity, {})
            ranked = sorted(per_entity.items(), key=lambda item: (-item[1], item[0]))
            self._ranked[entity] = ranked
        return ranked

    def topk_concepts(self, entity: str, k: int) -> ConceptBundle:
        """Top-k concepts by descending count (ties by name), padded to k."""
        if k <= 0:
            raise ConfigError(f"top-K size must be positive, got {k}")
        ranked = self._ranked_concepts(entity)[:k]
        concepts = [name for name, _ in ranked]
        counts = [count for _, count in ranked]
        pad = k - len(concepts)
        concepts += [PAD_CONCEPT] * pad
        counts += [0] * pad
        is_pad = [False] * (k - pad) + [True] * pad
        weights = weighting_scores(counts, is_pad, self.conditioning)
        return ConceptBundle(tuple(concepts), tuple(float(w) for w in weights), tuple(is_pad))


class DescriptionStore:
    """Name -> description text with an entity-type fallback."""

    def __init__(self):
        self._texts: dict[str, str] = {}
        self._types: dict[str, str] = {}

    def add(self, name: str, text: str) -> None:
        self._texts[name] = text

    def add_type(self, entity: str, entity_type: str) -> None:
        self._types[entity] = entity_type

    def load_descriptions(self, path: str | Path) -> int:
        """JSON Lines, one {"name", "text"} object per line."""
        n = 0
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise FormatError(f"{path}: line {lineno} is not valid JSON") from exc
                if not isinstance(obj, dict) or "name" not in obj or "text" not in obj:
                    raise FormatError(f"{path}: line {lineno} lacks name/text fields")
                self.add(str(obj["name"]), str(obj["text"]))
                n += 1
        return n

    def load_types(self, path: str | Path) -> int:
        n = 0
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise FormatError(f"{path}: line {lineno} is not 'entity<TAB>type'")
                self.add_type(parts[0], parts[1])
                n += 1
        return n

    def lookup_type(self, entity: str) -> str | None:
        return self._types.get(entity)

    def description(self, name: str, entity_type: str | None = None) -> str:
        """Stored text, else the entity type, else the no-description marker."""
        text = self._texts.get(name)
        if text is not None:
            return text
        if entity_type is None:
            entity_type = self._types.get(name)
        if entity_type is not None:
            return entity_type
        return NO_DESCRIPTION
