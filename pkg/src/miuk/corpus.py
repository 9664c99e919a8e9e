"""Document data model, entity anchoring, distance features and dataset IO.

Datasets are DocRED-shaped JSON: a list of documents, each with tokenized
sentences, an entity list (every entity is a cluster of mentions) and
multi-label relation facts between entity pairs. A synthetic generator
at the bottom builds desk-scale corpora with a known ground-truth rule
table so end-to-end behavior can be scored exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, FormatError

ANCHOR_FORMAT = "⟦E{}⟧"

DISTANCE_LIMIT = 512
DISTANCE_TABLE_SIZE = 2 * DISTANCE_LIMIT + 1

NO_RELATION = "No Relation"


@dataclass(frozen=True)
class Mention:
    sent_idx: int
    start: int
    end: int


@dataclass
class EntityCluster:
    entity_index: int
    name: str
    entity_type: str
    mentions: list[Mention]


@dataclass
class RelationLabel:
    head: int
    tail: int
    relations: frozenset[str]


@dataclass
class Document:
    doc_id: str
    sentences: list[list[str]]
    entities: list[EntityCluster]
    labels: list[RelationLabel]


def validate_document(doc: Document, doc_index: int | None = None) -> None:
    """Check every span and label reference; raise FormatError naming the field."""
    where = f"document {doc_index}" if doc_index is not None else f"document {doc.doc_id!r}"
    for ei, ent in enumerate(doc.entities):
        if ent.entity_index != ei:
            raise FormatError(f"{where}: vertexSet[{ei}]: entity_index {ent.entity_index} != {ei}")
        if not ent.mentions:
            raise FormatError(f"{where}: vertexSet[{ei}]: entity has no mentions")
        for mi, m in enumerate(ent.mentions):
            if not 0 <= m.sent_idx < len(doc.sentences):
                raise FormatError(
                    f"{where}: vertexSet[{ei}][{mi}].sent_id: {m.sent_idx} out of range")
            sent_len = len(doc.sentences[m.sent_idx])
            if not 0 <= m.start < m.end <= sent_len:
                raise FormatError(
                    f"{where}: vertexSet[{ei}][{mi}].pos: span [{m.start}, {m.end}) "
                    f"invalid for sentence of length {sent_len}")
        ordered = sorted(ent.mentions, key=lambda m: (m.sent_idx, m.start))
        if ordered != ent.mentions:
            raise FormatError(f"{where}: vertexSet[{ei}]: mentions not sorted")
    for li, lab in enumerate(doc.labels):
        for side, idx in (("h", lab.head), ("t", lab.tail)):
            if not 0 <= idx < len(doc.entities):
                raise FormatError(f"{where}: labels[{li}].{side}: {idx} out of range")
        if lab.head == lab.tail:
            raise FormatError(f"{where}: labels[{li}]: head equals tail ({lab.head})")
        if not lab.relations:
            raise FormatError(f"{where}: labels[{li}]: empty relation set")


def _document_from_json(obj, doc_index: int) -> Document:
    where = f"document {doc_index}"
    if not isinstance(obj, dict):
        raise FormatError(f"{where}: expected an object")
    for key in ("title", "sents", "vertexSet"):
        if key not in obj:
            raise FormatError(f"{where}: missing field {key!r}")
    sentences = obj["sents"]
    if not isinstance(sentences, list) or not all(
            isinstance(s, list) and all(isinstance(t, str) for t in s) for s in sentences):
        raise FormatError(f"{where}: sents: expected a list of token lists")
    entities = []
    for ei, cluster in enumerate(obj["vertexSet"]):
        if not isinstance(cluster, list) or not cluster:
            raise FormatError(f"{where}: vertexSet[{ei}]: expected a non-empty list")
        mentions = []
        for mi, m in enumerate(cluster):
            try:
                sent_idx = int(m["sent_id"])
                start, end = int(m["pos"][0]), int(m["pos"][1])
            except (KeyError, TypeError, ValueError, IndexError) as exc:
                raise FormatError(f"{where}: vertexSet[{ei}][{mi}]: bad mention record") from exc
            mentions.append(Mention(sent_idx, start, end))
        mentions.sort(key=lambda m: (m.sent_idx, m.start))
        entities.append(EntityCluster(
            entity_index=ei,
            name=str(cluster[0].get("name", "")),
            entity_type=str(cluster[0].get("type", "")),
            mentions=mentions,
        ))
    merged: dict[tuple[int, int], set[str]] = {}
    for li, lab in enumerate(obj.get("labels", [])):
        try:
            h, t, r = int(lab["h"]), int(lab["t"]), str(lab["r"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{where}: labels[{li}]: bad label record") from exc
        merged.setdefault((h, t), set()).add(r)
    labels = [RelationLabel(h, t, frozenset(rs)) for (h, t), rs in sorted(merged.items())]
    doc = Document(doc_id=str(obj["title"]), sentences=sentences, entities=entities,
                   labels=labels)
    validate_document(doc, doc_index)
    return doc


def load_dataset(path: str | Path) -> list[Document]:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise FormatError(f"{path}: expected a JSON list of documents")
    return [_document_from_json(obj, i) for i, obj in enumerate(data)]


def _document_to_json(doc: Document) -> dict:
    return {
        "title": doc.doc_id,
        "sents": doc.sentences,
        "vertexSet": [
            [{"name": ent.name, "type": ent.entity_type, "sent_id": m.sent_idx,
              "pos": [m.start, m.end]} for m in ent.mentions]
            for ent in doc.entities
        ],
        "labels": [
            {"h": lab.head, "t": lab.tail, "r": r}
            for lab in sorted(doc.labels, key=lambda l: (l.head, l.tail))
            for r in sorted(lab.relations)
        ],
    }


def save_dataset(docs: Iterable[Document], path: str | Path) -> None:
    payload = [_document_to_json(d) for d in docs]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, ensure_ascii=False, indent=1)
        fh.write("\n")


def collect_relations(docs: Iterable[Document]) -> list[str]:
    """Relation names in first-appearance order (stable vocabulary basis)."""
    seen: dict[str, None] = {}
    for doc in docs:
        for lab in doc.labels:
            for r in sorted(lab.relations):
                seen.setdefault(r, None)
    return list(seen)


def save_rel2id(names: list[str], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({name: i for i, name in enumerate(names)}, fh, ensure_ascii=False, indent=1)
        fh.write("\n")


def load_rel2id(path: str | Path) -> dict[str, int]:
    with open(path, "r", encoding="utf-8") as fh:
        mapping = json.load(fh)
    if not isinstance(mapping, dict):
        raise FormatError(f"{path}: expected an object mapping relation -> id")
    ids = sorted(mapping.values())
    if ids != list(range(len(mapping))):
        raise FormatError(f"{path}: ids must be exactly 0..{len(mapping) - 1}")
    return {str(k): int(v) for k, v in mapping.items()}


# ----------------------------------------------------------------- anchors ----

@dataclass
class AnchoredDocument:
    """A document with one anchor token inserted before every mention.

    All mentions of one entity share the same anchor token, so the flat
    sequence marks coreference explicitly. Offsets index the flattened
    anchored token sequence. Mention token positions are kept as explicit
    lists because an anchor of a nested mention may sit inside another
    mention's range.
    """

    doc: Document
    sentences: list[list[str]]
    flat_tokens: list[str]
    sent_offsets: list[int]
    anchor_positions: list[list[int]]       # [entity][mention] -> flat anchor offset
    mention_token_positions: list[list[list[int]]]  # [entity][mention] -> flat offsets

    @property
    def added_tokens(self) -> int:
        return sum(len(positions) for positions in self.anchor_positions)


def anchor_token(entity_index: int) -> str:
    return ANCHOR_FORMAT.format(entity_index)


def insert_anchors(doc: Document) -> AnchoredDocument:
    per_sentence: dict[int, list[tuple[int, int, int, int]]] = {}
    for ent in doc.entities:
        for mi, m in enumerate(ent.mentions):
            per_sentence.setdefault(m.sent_idx, []).append(
                (m.start, m.end, ent.entity_index, mi))
    anchored: list[list[str]] = []
    anchor_positions = [[0] * len(ent.mentions) for ent in doc.entities]
    mention_token_positions: list[list[list[int]]] = [
        [[] for _ in ent.mentions] for ent in doc.entities]
    sent_offsets: list[int] = []
    flat: list[str] = []
    for si, tokens in enumerate(doc.sentences):
        sent_offsets.append(len(flat))
        inserts: dict[int, list[tuple[int, int, int]]] = {}
        for start, end, ei, mi in sorted(per_sentence.get(si, [])):
            inserts.setdefault(start, []).append((end, ei, mi))
        new_tokens: list[str] = []
        position_map: list[int] = []  # original token index -> anchored index
        for pos in range(len(tokens) + 1):
            for end, ei, mi in inserts.get(pos, []):
                anchor_positions[ei][mi] = len(flat) + len(new_tokens)
                new_tokens.append(anchor_token(ei))
            if pos < len(tokens):
                position_map.append(len(new_tokens))
                new_tokens.append(tokens[pos])
        for start, end, ei, mi in per_sentence.get(si, []):
            mention_token_positions[ei][mi] = [
                sent_offsets[si] + position_map[p] for p in range(start, end)]
        anchored.append(new_tokens)
        flat.extend(new_tokens)
    return AnchoredDocument(doc=doc, sentences=anchored, flat_tokens=flat,
                            sent_offsets=sent_offsets, anchor_positions=anchor_positions,
                            mention_token_positions=mention_token_positions)


# ---------------------------------------------------------------- distances ----

def min_distance(adoc: AnchoredDocument, head: int, tail: int) -> int:
    """Signed offset difference of the closest head/tail mention pair.

    Computed canonically for the lower entity index and negated for the
    other direction, which makes antisymmetry exact even when several
    mention pairs tie on absolute distance.
    """
    if head == tail:
        raise ConfigError(f"distance of entity {head} to itself is undefined")
    a, b = (head, tail) if head < tail else (tail, head)
    offs_a = adoc.anchor_positions[a]
    offs_b = adoc.anchor_positions[b]
    if not offs_a or not offs_b:
        raise FormatError("entity with zero mentions has no distance")
    best: tuple[int, int, int] | None = None
    signed = 0
    for oa in offs_a:
        for ob in offs_b:
            key = (abs(ob - oa), oa, ob)
            if best is None or key < best:
                best = key
                signed = ob - oa
    return signed if head == a else -signed


def clamp_distance(d: int) -> int:
    return max(-DISTANCE_LIMIT, min(DISTANCE_LIMIT, d))


def distance_index(d: int) -> int:
    """Row index into the distance embedding table."""
    return clamp_distance(d) + DISTANCE_LIMIT


def candidate_pairs(doc: Document) -> list[tuple[int, int]]:
    """All ordered entity pairs (head, tail), head != tail, lexicographic."""
    p = len(doc.entities)
    return [(h, t) for h in range(p) for t in range(p) if h != t]


# ------------------------------------------------------------ synthetic data ----

@dataclass
class SyntheticConfig:
    """Shape of a generated corpus; every field has a desk-scale default."""

    num_concepts: int = 8
    entities_per_concept: int = 6
    num_relation_types: int = 4
    num_documents: int = 100
    sentences_per_document: int = 3
    mentions_per_entity: int = 2
    entities_per_document: int = 5
    prior_dominance: float = 0.5      # chance a positive pair has no lexical trigger
    relation_density: float = 0.25    # fraction of concept pairs that map to a relation
    filler_tokens_per_sentence: int = 6
    generic_mentions: bool = False    # hide entity identity from the surface text

    def validate(self) -> None:
        if self.num_relation_types < 1:
            raise ConfigError("num_relation_types must be at least 1")
        if self.num_concepts < 2:
            raise ConfigError("num_concepts must be at least 2")
        if self.entities_per_concept < 1:
            raise ConfigError("entities_per_concept must be at least 1")
        if self.num_documents < 1:
            raise ConfigError("num_documents must be at least 1")
        if self.sentences_per_document < 1:
            raise ConfigError("sentences_per_document must be at least 1")
        if self.mentions_per_entity < 1:
            raise ConfigError("mentions_per_entity must be at least 1")
        if not 0.0 <= self.prior_dominance <= 1.0:
            raise ConfigError("prior_dominance must lie in [0, 1]")
        if not 0.0 < self.relation_density <= 1.0:
            raise ConfigError("relation_density must lie in (0, 1]")
        pool = self.num_concepts * self.entities_per_concept
        if not 2 <= self.entities_per_document <= pool:
            raise ConfigError(
                f"entities_per_document must lie in [2, {pool}] for this pool")


@dataclass
class SyntheticCorpus:
    documents: list[Document]
    triples: list[str]                  # TSV lines
    descriptions: list[dict]            # {"name", "text"} records
    entity_types: list[str]             # TSV lines
    rules: dict[str, str]               # "concept|concept" -> relation name
    primary_concept: dict[str, str]     # entity name -> its dominant concept
    config: SyntheticConfig
    seed: int

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "dataset": out / "dataset.json",
            "triples": out / "triples.tsv",
            "descriptions": out / "descriptions.jsonl",
            "types": out / "types.tsv",
            "rules": out / "rules.json",
            "manifest": out / "manifest.json",
        }
        save_dataset(self.documents, paths["dataset"])
        paths["triples"].write_text("".join(line + "\n" for line in self.triples),
                                    encoding="utf-8")
        with open(paths["descriptions"], "w", encoding="utf-8") as fh:
            for rec in self.descriptions:
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
        paths["types"].write_text("".join(line + "\n" for line in self.entity_types),
                                  encoding="utf-8")
        with open(paths["rules"], "w", encoding="utf-8") as fh:
            json.dump(self.rules, fh, ensure_ascii=False, indent=1)
            fh.write("\n")
        config_blob = json.dumps(self.config.__dict__, sort_keys=True)
        manifest = {"seed": self.seed, "config": self.config.__dict__,
                    "config_hash": hashlib.sha256(config_blob.encode()).hexdigest(),
                    "num_documents": len(self.documents)}
        with open(paths["manifest"], "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, ensure_ascii=False, indent=1)
            fh.write("\n")
        return paths


def _build_rule_table(cfg: SyntheticConfig, rng: np.random.Generator) -> dict[tuple[str, str], str]:
    concepts = [f"concept_{i}" for i in range(cfg.num_concepts)]
    pairs = [(a, b) for a in concepts for b in concepts if a != b]
    order = rng.permutation(len(pairs))
    n_rules = max(cfg.num_relation_types, int(round(cfg.relation_density * len(pairs))))
    n_rules = min(n_rules, len(pairs))
    table: dict[tuple[str, str], str] = {}
    for slot, idx in enumerate(order[:n_rules]):
        table[pairs[idx]] = f"R{slot % cfg.num_relation_types}"
    return table


def generate_synthetic(cfg: SyntheticConfig, seed: int) -> SyntheticCorpus:
    """Build a corpus whose labels follow a (concept, concept) -> relation table.

    Each entity leans on one dominant concept (high count) plus a few
    low-count distractors. A positive pair gets a lexical trigger token
    planted near a head mention with probability 1 - prior_dominance;
    otherwise only the concept prior reveals the relation.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    concepts = [f"concept_{i}" for i in range(cfg.num_concepts)]
    rule_table = _build_rule_table(cfg, rng)

    entity_names: list[str] = []
    primary: dict[str, str] = {}
    triples: list[str] = []
    descriptions: list[dict] = []
    types: list[str] = []
    for ci, concept in enumerate(concepts):
        for j in range(cfg.entities_per_concept):
            name = f"ent_{ci}_{j}"
            entity_names.append(name)
            primary[name] = concept
            triples.append(f"{name}\t{concept}\t{int(rng.integers(20, 51))}")
            n_distractors = int(rng.integers(0, 5))
            others = [c for c in concepts if c != concept]
            for d in rng.choice(len(others), size=min(n_distractors, len(others)),
                                replace=False):
                triples.append(f"{name}\t{others[int(d)]}\t{int(rng.integers(1, 6))}")
            descriptions.append({
                "name": name,
                "text": f"a typical instance of {concept} often discussed in reports",
            })
            types.append(f"{name}\tT{ci % 3}")
    for concept in concepts:
        descriptions.append({
            "name": concept,
            "text": f"{concept} is a broad category grouping similar things",
        })

    filler_vocab = [f"w{i}" for i in range(40)]
    documents: list[Document] = []
    for doc_i in range(cfg.num_documents):
        chosen = rng.choice(len(entity_names), size=cfg.entities_per_document,
                            replace=False)
        names = [entity_names[int(i)] for i in chosen]
        # mention plan: entity -> sentence indices (one mention per listed slot)
        mention_sents = [
            sorted(int(s) for s in rng.integers(0, cfg.sentences_per_document,
                                                size=cfg.mentions_per_entity))
            for _ in names
        ]
        labels: list[RelationLabel] = []
        trigger_plan: dict[int, list[str]] = {}
        for h in range(len(names)):
            for t in range(len(names)):
                if h == t:
                    continue
                rel = rule_table.get((primary[names[h]], primary[names[t]]))
                if rel is None:
                    continue
                labels.append(RelationLabel(h, t, frozenset({rel})))
                if rng.random() >= cfg.prior_dominance:
                    shared = sorted(set(mention_sents[h]) & set(mention_sents[t]))
                    pool = shared if shared else sorted(set(mention_sents[h]))
                    sent = pool[int(rng.integers(0, len(pool)))]
                    trigger_plan.setdefault(sent, []).append(f"TRIG_{rel}")
        sentences: list[list[str]] = []
        entity_mentions: list[list[Mention]] = [[] for _ in names]
        for si in range(cfg.sentences_per_document):
            items: list[tuple[str, int | None]] = []
            for ei, sent_list in enumerate(mention_sents):
                for s in sent_list:
                    if s == si:
                        surface = "ENT" if cfg.generic_mentions else names[ei]
                        items.append((surface, ei))
            for trig in trigger_plan.get(si, []):
                items.append((trig, None))
            for _ in range(cfg.filler_tokens_per_sentence):
                items.append((filler_vocab[int(rng.integers(0, len(filler_vocab)))], None))
            order = rng.permutation(len(items))
            tokens: list[str] = []
            for idx in order:
                token, ei = items[int(idx)]
                if ei is not None:
                    entity_mentions[ei].append(Mention(si, len(tokens), len(tokens) + 1))
                tokens.append(token)
            sentences.append(tokens)
        entities = []
        for ei, name in enumerate(names):
            mentions = sorted(entity_mentions[ei], key=lambda m: (m.sent_idx, m.start))
            entities.append(EntityCluster(
                entity_index=ei, name=name,
                entity_type=f"T{concepts.index(primary[name]) % 3}",
                mentions=mentions))
        doc = Document(doc_id=f"synth-{seed}-{doc_i}", sentences=sentences,
                       entities=entities, labels=labels)
        validate_document(doc, doc_i)
        documents.append(doc)

    rules_flat = {f"{a}|{b}": r for (a, b), r in sorted(rule_table.items())}
    return SyntheticCorpus(documents=documents, triples=triples,
                           descriptions=descriptions, entity_types=types,
                           rules=rules_flat, primary_concept=dict(primary),
                           config=cfg, seed=seed)
