"""Training loop, metrics, threshold tuning and cross-validation splits.

The loss is multi-label binary cross-entropy over independent relation
sigmoids; a document pair with no relation is the all-zero target vector.
Runs are deterministic: every random stream (shuffling, dropout) derives
from the configured seed and the epoch number, so identical configs give
bit-identical histories.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .corpus import Document, NO_RELATION, candidate_pairs, insert_anchors
from .errors import ConfigError, NumericError
from .kg import DescriptionStore, KnowledgeStore
from .model import Dimensions, Model, ModeConfig, build_params, learning_rates

THRESHOLD_POLICIES = ("fixed", "dev_tuned")


@dataclass
class TrainConfig:
    lr_encoder: float = 1e-5
    lr_other: float = 1e-5
    batch_size: int = 16
    epochs: int = 10
    dropout: float = 0.2
    seed: int = 0
    threshold_policy: str = "fixed"
    threshold: float = 0.5

    def validate(self) -> None:
        if self.lr_encoder <= 0 or self.lr_other <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.threshold_policy not in THRESHOLD_POLICIES:
            raise ConfigError(f"threshold_policy must be one of {THRESHOLD_POLICIES}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must lie in [0, 1], got {self.threshold}")


@dataclass
class Metrics:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int


def _metrics_from_counts(tp: int, fp: int, fn: int) -> Metrics:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return Metrics(precision, recall, f1, tp, fp, fn)


@dataclass
class DocEval:
    overall: Metrics
    ignore_train: Metrics
    degenerate_ignore: bool   # no facts left once train overlap is removed


# ----------------------------------------------------------------------- loss ----

LOG_FLOOR = 1e-12


def bce_loss(scores: Sequence[Tensor], targets: Sequence[np.ndarray]) -> Tensor:
    """Mean binary cross-entropy over all (pair, relation) slots."""
    if len(scores) == 0:
        raise ConfigError("bce_loss needs at least one scored pair")
    if len(scores) != len(targets):
        raise ConfigError("scores and targets differ in length")
    total: Tensor | None = None
    slots = 0
    for p, y in zip(scores, targets):
        if not np.isfinite(p.data).all() or (p.data < 0).any() or (p.data > 1).any():
            raise NumericError("relation scores left (0, 1) during loss computation")
        y = np.asarray(y, dtype=p.data.dtype)
        if y.shape != p.shape:
            raise ConfigError(f"target shape {y.shape} does not match scores {p.shape}")
        ones = ad.constant(np.ones_like(y))
        log_p = ad.log(ad.clamp_min(p, LOG_FLOOR))
        log_not_p = ad.log(ad.clamp_min(ad.sub(ones, p), LOG_FLOOR))
        term = ad.add(ad.mul(ad.constant(y), log_p),
                      ad.mul(ad.constant(1.0 - y), log_not_p))
        contrib = ad.neg(ad.sum_all(term))
        total = contrib if total is None else ad.add(total, contrib)
        slots += y.size
    return ad.scale(total, 1.0 / slots)


# ------------------------------------------------------------------- scoring ----

@dataclass
class PairScore:
    doc_id: str
    head: int
    tail: int
    head_name: str
    tail_name: str
    scores: np.ndarray


def pair_targets(doc: Document, rel_index: dict[str, int]) -> dict[tuple[int, int], np.ndarray]:
    """Binary target vector per candidate pair; unlabeled pairs are all-zero."""
    targets = {pair: np.zeros(len(rel_index)) for pair in candidate_pairs(doc)}
    for lab in doc.labels:
        vec = targets[(lab.head, lab.tail)]
        for r in lab.relations:
            if r in rel_index:
                vec[rel_index[r]] = 1.0
    return targets


def score_documents(model: Model, documents: Iterable[Document], kg: KnowledgeStore,
                    descriptions: DescriptionStore) -> list[PairScore]:
    """Deterministic evaluation-mode forward over every candidate pair."""
    out: list[PairScore] = []
    for doc in documents:
        adoc = insert_anchors(doc)
        state = model.prepare_document(adoc, kg, descriptions, training=False)
        for h, t in candidate_pairs(doc):
            trace = model.forward_pair(state, h, t, training=False)
            out.append(PairScore(
                doc_id=doc.doc_id, head=h, tail=t,
                head_name=doc.entities[h].name, tail_name=doc.entities[t].name,
                scores=np.asarray(trace.scores.data, dtype=np.float64).copy()))
    return out


def facts_from_scores(pair_scores: Iterable[PairScore], rel_names: Sequence[str],
                      threshold: float) -> set[tuple[str, str, str, str]]:
    facts = set()
    for ps in pair_scores:
        for ri in np.flatnonzero(ps.scores >= threshold):
            facts.add((ps.doc_id, ps.head_name, ps.tail_name, rel_names[int(ri)]))
    return facts


def gold_facts(documents: Iterable[Document]) -> set[tuple[str, str, str, str]]:
    facts = set()
    for doc in documents:
        for lab in doc.labels:
            for r in lab.relations:
                facts.add((doc.doc_id, doc.entities[lab.head].name,
                           doc.entities[lab.tail].name, r))
    return facts


def name_triples(documents: Iterable[Document]) -> set[tuple[str, str, str]]:
    """(head name, tail name, relation) triples seen in a training corpus."""
    return {(h, t, r) for _, h, t, r in gold_facts(documents)}


# ------------------------------------------------------------------- metrics ----

def evaluate_doclevel(predicted: set[tuple[str, str, str, str]],
                      gold: set[tuple[str, str, str, str]],
                      train_triples: set[tuple[str, str, str]]) -> DocEval:
    """Document-level F1, plus the stricter score that drops every fact
    whose name triple already occurred in training (from both sides)."""
    tp = len(predicted & gold)
    overall = _metrics_from_counts(tp, len(predicted) - tp, len(gold) - tp)

    def fresh(facts):
        return {f for f in facts if (f[1], f[2], f[3]) not in train_triples}

    pred_fresh = fresh(predicted)
    gold_fresh = fresh(gold)
    tp_fresh = len(pred_fresh & gold_fresh)
    ignore = _metrics_from_counts(tp_fresh, len(pred_fresh) - tp_fresh,
                                  len(gold_fresh) - tp_fresh)
    degenerate = not pred_fresh and not gold_fresh
    return DocEval(overall=overall, ignore_train=ignore, degenerate_ignore=degenerate)


def sentence_prediction(scores: np.ndarray, rel_names: Sequence[str],
                        threshold: float) -> str:
    """Single-label rule: best relation if it clears the threshold, else none."""
    best = int(np.argmax(scores))
    if scores[best] < threshold:
        return NO_RELATION
    return rel_names[best]


def evaluate_sentlevel(predicted: Sequence[str], gold: Sequence[str]) -> Metrics:
    """Micro P/R/F1 over positive classes; "No Relation" is not a class."""
    if len(predicted) != len(gold):
        raise ConfigError("prediction and gold lists differ in length")
    tp = fp = fn = 0
    for p, g in zip(predicted, gold):
        if p == g:
            if g != NO_RELATION:
                tp += 1
            continue
        if p != NO_RELATION:
            fp += 1
        if g != NO_RELATION:
            fn += 1
    return _metrics_from_counts(tp, fp, fn)


# ------------------------------------------------------------------ threshold ----

def _f1_at(scores: np.ndarray, gold: np.ndarray, threshold: float) -> float:
    pred = scores >= threshold
    tp = int(np.sum(pred & gold))
    fp = int(np.sum(pred & ~gold))
    fn = int(np.sum(~pred & gold))
    return _metrics_from_counts(tp, fp, fn).f1


def tune_threshold(scores: Sequence[float], gold: Sequence[bool]) -> float:
    """Pick the threshold (among distinct scores) maximizing F1; ties go to
    the lowest value so recall is preferred among equals."""
    scores = np.asarray(scores, dtype=np.float64)
    gold = np.asarray(gold, dtype=bool)
    if scores.size == 0:
        raise ConfigError("cannot tune a threshold on an empty dev set")
    if scores.shape != gold.shape:
        raise ConfigError("scores and gold differ in shape")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    cum_tp = np.cumsum(gold[order])
    total_gold = int(gold.sum())
    n = scores.size
    # Predicting ">= sorted_scores[i]" keeps the whole tie group of i; use
    # the last index of each group so prefix counts are consistent.
    last_of_group = np.flatnonzero(np.r_[sorted_scores[1:] != sorted_scores[:-1], True])
    tp = cum_tp[last_of_group]
    kept = last_of_group + 1
    fp = kept - tp
    fn = total_gold - tp
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(kept > 0, tp / kept, 0.0)
        recall = np.where(total_gold > 0, tp / np.maximum(total_gold, 1), 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / np.maximum(denom, 1e-300), 0.0)
    best_f1 = f1.max()
    candidates = sorted_scores[last_of_group][f1 >= best_f1]
    return float(candidates.min())


# --------------------------------------------------------------------- kfold ----

def kfold(n_items: int, k: int = 5, seed: int = 0) -> list[tuple[list[int], list[int]]]:
    """Seeded shuffle, then contiguous folds whose sizes differ by at most 1."""
    if k < 2:
        raise ConfigError(f"k must be at least 2, got {k}")
    if k > n_items:
        raise ConfigError(f"cannot split {n_items} items into {k} folds")
    rng = np.random.default_rng(seed)
    order = [int(i) for i in rng.permutation(n_items)]
    base, extra = divmod(n_items, k)
    splits = []
    start = 0
    for fold in range(k):
        size = base + (1 if fold < extra else 0)
        test = order[start:start + size]
        train = order[:start] + order[start + size:]
        splits.append((train, test))
        start += size
    return splits


# ------------------------------------------------------------------- training ----

@dataclass
class TrainResult:
    params: ParamStore
    model: Model
    rel_names: list[str]
    history: list[dict] = field(default_factory=list)
    threshold: float = 0.5


def _epoch_rng(seed: int, salt: int, epoch: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, salt, epoch])))


def train(documents: list[Document], kg: KnowledgeStore,
          descriptions: DescriptionStore, rel_names: list[str], mode: ModeConfig,
          dims: Dimensions, cfg: TrainConfig, embedder,
          dev_documents: list[Document] | None = None,
          history_path: str | Path | None = None,
          log_fn: Callable[[str], None] | None = None) -> TrainResult:
    """Run the full loop; returns trained parameters and per-epoch history."""
    cfg.validate()
    if not documents:
        raise ConfigError("training set is empty")
    if dims.num_relations != len(rel_names):
        raise ConfigError(f"dims.num_relations {dims.num_relations} does not match "
                          f"vocabulary size {len(rel_names)}")
    rel_index = {r: i for i, r in enumerate(rel_names)}
    params = build_params(mode, dims, seed=cfg.seed)
    model = Model(mode, dims, params, embedder, dropout_ratio=cfg.dropout)
    rates = learning_rates(params, cfg.lr_encoder, cfg.lr_other)
    train_triples = name_triples(documents)
    history: list[dict] = []
    history_file = open(history_path, "w", encoding="utf-8") if history_path else None
    threshold = cfg.threshold
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = _epoch_rng(cfg.seed, 101, epoch).permutation(len(documents))
            dropout_rng = _epoch_rng(cfg.seed, 202, epoch)
            loss_sum = 0.0
            pair_count = 0
            for step, start in enumerate(range(0, len(order), cfg.batch_size)):
                batch = [documents[int(i)] for i in order[start:start + cfg.batch_size]]
                params.zero_grad()
                scores: list[Tensor] = []
                targets: list[np.ndarray] = []
                for doc in batch:
                    adoc = insert_anchors(doc)
                    state = model.prepare_document(adoc, kg, descriptions,
                                                   rng=dropout_rng, training=True)
                    for (h, t), y in pair_targets(doc, rel_index).items():
                        trace = model.forward_pair(state, h, t, rng=dropout_rng,
                                                   training=True)
                        scores.append(trace.scores)
                        targets.append(y)
                if not scores:
                    continue
                loss = bce_loss(scores, targets)
                if not np.isfinite(loss.data):
                    raise NumericError(
                        f"loss became non-finite at epoch {epoch}, step {step}")
                loss.backward()
                params.adam_step(rates)
                loss_sum += float(loss.data) * len(scores)
                pair_count += len(scores)
            epoch_loss = loss_sum / pair_count if pair_count else 0.0
            entry: dict = {"epoch": epoch, "loss": epoch_loss,
                           "dev_f1": None, "dev_ign_f1": None}
            if dev_documents:
                pair_scores = score_documents(model, dev_documents, kg, descriptions)
                if cfg.threshold_policy == "dev_tuned":
                    flat_scores, flat_gold = flatten_for_tuning(
                        pair_scores, dev_documents, rel_names)
                    threshold = tune_threshold(flat_scores, flat_gold)
                predicted = facts_from_scores(pair_scores, rel_names, threshold)
                result = evaluate_doclevel(predicted, gold_facts(dev_documents),
                                           train_triples)
                entry["dev_f1"] = result.overall.f1
                entry["dev_ign_f1"] = result.ignore_train.f1
            history.append(entry)
            if history_file:
                history_file.write(json.dumps(entry) + "\n")
                history_file.flush()
            if log_fn:
                shown = "" if entry["dev_f1"] is None else f"  dev_f1={entry['dev_f1']:.4f}"
                log_fn(f"epoch {epoch}: loss={epoch_loss:.6f}{shown}")
    finally:
        if history_file:
            history_file.close()
    return TrainResult(params=params, model=model, rel_names=list(rel_names),
                       history=history, threshold=threshold)


def flatten_for_tuning(pair_scores: list[PairScore], documents: list[Document],
                       rel_names: list[str]) -> tuple[np.ndarray, np.ndarray]:
    """Flatten per-pair score vectors and gold indicators for threshold tuning."""
    gold = gold_facts(documents)
    scores = []
    truth = []
    for ps in pair_scores:
        for ri, r in enumerate(rel_names):
            scores.append(float(ps.scores[ri]))
            truth.append((ps.doc_id, ps.head_name, ps.tail_name, r) in gold)
    return np.asarray(scores), np.asarray(truth, dtype=bool)
