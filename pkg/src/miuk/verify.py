"""Numerical verification: finite-difference gradient checks and a battery
of randomized structural invariants over full forward passes.

Everything here runs in 64-bit mode. The op-level checks must stay below
1e-6 relative error, the full-model check below 1e-4.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore
from .corpus import Document, EntityCluster, Mention, candidate_pairs, insert_anchors
from .encoder import HashEmbedder
from .errors import NumericError
from .kg import DescriptionStore, KnowledgeStore
from .model import Dimensions, Model, ModeConfig, build_params
from .training import bce_loss, pair_targets

OP_TOLERANCE = 1e-6
MODEL_TOLERANCE = 1e-4


def check_op_gradients(seed: int = 0) -> dict[str, float]:
    """Finite-difference check for every differentiable op; returns the
    worst relative error per op name."""
    results: dict[str, float] = {}
    with ad.precision(np.float64):
        rng = np.random.default_rng(seed)

        def check(name, build, shapes):
            store = ParamStore()
            for pname, shape in shapes.items():
                store.create(pname, rng.standard_normal(shape) * 0.5)
            results[name] = ad.grad_check(build, store, seed=seed)

        check("add_sub_neg",
              lambda ps: ad.sum_all(ad.neg(ad.sub(ad.add(ps["a"], ps["b"]), ps["a"]))),
              {"a": (4,), "b": (4,)})
        check("mul_scale",
              lambda ps: ad.sum_all(ad.scale(ad.mul(ps["a"], ps["b"]), 1.7)),
              {"a": (5,), "b": (5,)})
        check("matmul_mm",
              lambda ps: ad.sum_all(ad.matmul(ps["a"], ps["b"])),
              {"a": (3, 4), "b": (4, 2)})
        check("matmul_mv",
              lambda ps: ad.sum_all(ad.matmul(ps["a"], ps["v"])),
              {"a": (3, 4), "v": (4,)})
        check("matmul_vm",
              lambda ps: ad.sum_all(ad.matmul(ps["v"], ps["a"])),
              {"v": (3,), "a": (3, 4)})
        check("matmul_dot",
              lambda ps: ad.matmul(ps["u"], ps["v"]),
              {"u": (6,), "v": (6,)})
        check("bilinear",
              lambda ps: ad.sum_all(ad.bilinear(ps["x"], ps["w"], ps["y"], ps["b"])),
              {"x": (3,), "w": (3, 4, 2), "y": (2,), "b": (4,)})
        check("sigmoid",
              lambda ps: ad.sum_all(ad.sigmoid(ps["x"])),
              {"x": (6,)})
        check("softmax",
              lambda ps: ad.sum_all(ad.mul(ad.softmax(ps["x"]), ps["q"])),
              {"x": (5,), "q": (5,)})
        check("softmax_masked",
              lambda ps: ad.sum_all(ad.mul(
                  ad.softmax(ps["x"], mask=[True, False, True, True, False]), ps["q"])),
              {"x": (5,), "q": (5,)})
        check("log_clamp",
              lambda ps: ad.sum_all(ad.log(ad.clamp_min(ad.sigmoid(ps["x"]), 1e-12))),
              {"x": (4,)})
        check("concat",
              lambda ps: ad.sum_all(ad.mul(ad.concat([ps["a"], ps["b"]]),
                                           ad.concat([ps["a"], ps["b"]]))),
              {"a": (3,), "b": (2,)})
        check("stack_rows",
              lambda ps: ad.sum_all(ad.sigmoid(ad.stack_rows([ps["a"], ps["b"], ps["a"]]))),
              {"a": (4,), "b": (4,)})
        check("gather_rows",
              lambda ps: ad.sum_all(ad.mul(ad.gather_rows(ps["m"], [0, 2, 0]),
                                           ad.gather_rows(ps["m"], [1, 1, 2]))),
              {"m": (3, 4)})
        check("select_row",
              lambda ps: ad.sum_all(ad.mul(ad.select_row(ps["m"], 1),
                                           ad.select_row(ps["m"], 1))),
              {"m": (3, 4)})
        check("add_rowvec",
              lambda ps: ad.sum_all(ad.sigmoid(ad.add_rowvec(ps["m"], ps["v"]))),
              {"m": (3, 4), "v": (4,)})
        check("pool_max",
              lambda ps: ad.sum_all(ad.sigmoid(ad.pool(ps["m"], "max"))),
              {"m": (4, 3)})
        check("pool_mean",
              lambda ps: ad.sum_all(ad.sigmoid(ad.pool(ps["m"], "mean"))),
              {"m": (4, 3)})

        def dropout_loss(ps):
            # fresh identically-seeded rng per call keeps the loss deterministic
            local = np.random.Generator(np.random.PCG64(12345))
            return ad.sum_all(ad.dropout(ps["x"], 0.4, local, training=True))

        check("dropout", dropout_loss, {"x": (12,)})
    failures = {k: v for k, v in results.items() if v >= OP_TOLERANCE}
    if failures:
        raise NumericError(f"op gradient checks failed: {failures}")
    return results


# --------------------------------------------------------- random instances ----

@dataclass
class Instance:
    """A complete random model + inputs bundle for verification runs."""

    doc: Document
    kg: KnowledgeStore
    descriptions: DescriptionStore
    mode: ModeConfig
    dims: Dimensions
    params: ParamStore
    model: Model
    rel_names: list[str]


def random_instance(rng: np.random.Generator, mode: ModeConfig | None = None,
                    model_dim: int | None = None) -> Instance:
    """Small random document, KG and model; shapes stay tiny (p<=4, t<=3)."""
    if mode is None:
        mode = ModeConfig(
            views="two_view" if rng.random() < 0.2 else "three_view",
            integration=("NWI", "AWI", "PWI")[int(rng.integers(0, 3))],
            top_k=int(rng.integers(1, 5)),
            cross_view_inference=rng.random() < 0.85,
            mixed_attention=rng.random() < 0.8,
            use_entity_desp=rng.random() < 0.8,
            use_concept_desp=rng.random() < 0.8,
            anchor_in_sentpool=rng.random() < 0.8,
            normalize_mixed_weights=rng.random() < 0.2,
        )
    d = model_dim if model_dim is not None else int(rng.integers(4, 9))
    dims = Dimensions(model_dim=d, base_dim=16, distance_dim=4,
                      num_relations=int(rng.integers(1, 4)))
    n_sents = 1 if mode.views == "two_view" else int(rng.integers(1, 4))
    sentences = [[f"tok{int(rng.integers(0, 20))}"
                  for _ in range(int(rng.integers(3, 8)))] for _ in range(n_sents)]
    p = int(rng.integers(2, 5))
    entities = []
    for ei in range(p):
        n_mentions = 1 if mode.views == "two_view" else int(rng.integers(1, 4))
        mentions = []
        for _ in range(n_mentions):
            si = int(rng.integers(0, n_sents))
            pos = int(rng.integers(0, len(sentences[si])))
            mentions.append(Mention(si, pos, pos + 1))
        mentions.sort(key=lambda m: (m.sent_idx, m.start))
        entities.append(EntityCluster(ei, f"ent{ei}", f"T{ei % 2}", mentions))
    doc = Document("verify", sentences, entities, [])
    kg = KnowledgeStore()
    for ent in entities:
        for ci in range(int(rng.integers(0, 5))):
            kg.add(ent.name, f"c{int(rng.integers(0, 6))}", int(rng.integers(0, 40)))
    descriptions = DescriptionStore()
    for ent in entities:
        if rng.random() < 0.7:
            words = " ".join(f"d{int(rng.integers(0, 15))}"
                             for _ in range(int(rng.integers(1, 6))))
            descriptions.add(ent.name, words)
    for ci in range(6):
        if rng.random() < 0.7:
            descriptions.add(f"c{ci}", f"about category c{ci}")
    params = build_params(mode, dims, seed=int(rng.integers(0, 2 ** 31)))
    embedder = HashEmbedder(base_dim=dims.base_dim, seed=int(rng.integers(0, 2 ** 31)))
    model = Model(mode, dims, params, embedder, dropout_ratio=0.2)
    rel_names = [f"R{i}" for i in range(dims.num_relations)]
    return Instance(doc=doc, kg=kg, descriptions=descriptions, mode=mode, dims=dims,
                    params=params, model=model, rel_names=rel_names)


def check_model_gradient(seed: int = 0, sample_cap: int = 1024) -> float:
    """Finite-difference check of the full forward + loss against every
    parameter group; returns the worst relative error."""
    with ad.precision(np.float64):
        rng = np.random.default_rng(seed)
        mode = ModeConfig()
        inst = random_instance(rng, mode=mode, model_dim=8)
        rel_index = {r: i for i, r in enumerate(inst.rel_names)}
        targets = pair_targets(inst.doc, rel_index)
        # label one pair positively so both log branches carry gradient
        first = next(iter(targets))
        targets[first][0] = 1.0
        pairs = list(targets)[:3]
        adoc = insert_anchors(inst.doc)

        def build_loss(params: ParamStore):
            model = Model(inst.mode, inst.dims, params, inst.model.encoder.embedder,
                          dropout_ratio=0.0)
            state = model.prepare_document(adoc, inst.kg, inst.descriptions)
            scores = [model.forward_pair(state, h, t).scores for h, t in pairs]
            return bce_loss(scores, [targets[p] for p in pairs])

        worst = ad.grad_check(build_loss, inst.params, sample_cap=sample_cap, seed=seed)
    if worst >= MODEL_TOLERANCE:
        raise NumericError(f"model gradient check failed: {worst:.3e}")
    return worst


def run_invariant_battery(cases: int = 1000, seed: int = 0) -> dict[str, int]:
    """Randomized forward passes checked against the structural contracts:
    attention normalization, gate range, weight totals, score range."""
    counts = {"cases": 0, "pairs": 0}
    tol = 1e-9
    with ad.precision(np.float64):
        rng = np.random.default_rng(seed)
        for _ in range(cases):
            inst = random_instance(rng)
            adoc = insert_anchors(inst.doc)
            state = inst.model.prepare_document(adoc, inst.kg, inst.descriptions)
            all_pairs = candidate_pairs(inst.doc)
            picks = [all_pairs[int(i)] for i in
                     rng.choice(len(all_pairs), size=min(2, len(all_pairs)),
                                replace=False)]
            for h, t in picks:
                trace = inst.model.forward_pair(state, h, t)
                _assert_trace_invariants(trace, inst.mode, tol)
                counts["pairs"] += 1
            counts["cases"] += 1
    return counts


def _assert_trace_invariants(trace, mode: ModeConfig, tol: float) -> None:
    def fail(msg):
        raise NumericError(f"invariant violated for pair {trace.pair}: {msg}")

    for name, attn in (("head mention", trace.head_mention_attention),
                       ("tail mention", trace.tail_mention_attention)):
        if attn is not None and abs(float(np.sum(attn)) - 1.0) > tol:
            fail(f"{name} attention sums to {np.sum(attn)}")
    for name, weights in (("head concept", trace.head_concept_weights),
                          ("tail concept", trace.tail_concept_weights)):
        total = float(np.sum(weights))
        if not (abs(total) <= tol or abs(total - 1.0) <= tol):
            fail(f"{name} weights sum to {total}")
        if (np.asarray(weights) < -tol).any():
            fail(f"{name} weights contain negatives")
    scores = trace.scores.data
    if not ((scores > 0.0) & (scores < 1.0)).all():
        fail("scores left the open unit interval")
    if not mode.cross_view_inference:
        return
    gate = trace.gate
    if not ((gate > 0.0) & (gate < 1.0)).all():
        fail("gate left the open unit interval")
    lo = np.minimum(trace.local_pair, trace.global_pair) - tol
    hi = np.maximum(trace.local_pair, trace.global_pair) + tol
    if not ((trace.fused_pair >= lo) & (trace.fused_pair <= hi)).all():
        fail("fused vector escapes the [local, global] envelope")
    for name, attn in (("sentence local", trace.sentence_local_attention),
                       ("sentence global", trace.sentence_global_attention)):
        if abs(float(np.sum(attn)) - 1.0) > tol:
            fail(f"{name} attention sums to {np.sum(attn)}")
    expected_total = 2.0 if mode.mixed_attention else 1.0
    if mode.normalize_mixed_weights:
        expected_total = 1.0
    if abs(float(np.sum(trace.sentence_weights)) - expected_total) > tol:
        fail(f"sentence weights sum to {np.sum(trace.sentence_weights)}, "
             f"expected {expected_total}")
