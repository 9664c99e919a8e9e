"""Self-check suites: per-op gradients, full-model gradient, invariants."""

import numpy as np

from miuk.corpus import candidate_pairs
from miuk.verify import (MODEL_TOLERANCE, OP_TOLERANCE, check_model_gradient,
                         check_op_gradients, random_instance,
                         run_invariant_battery)

EXPECTED_OPS = {
    "add_sub_neg", "mul_scale", "matmul_mm", "matmul_mv", "matmul_vm",
    "matmul_dot", "bilinear", "sigmoid", "softmax", "softmax_masked",
    "log_clamp", "concat", "stack_rows", "gather_rows", "select_row",
    "add_rowvec", "pool_max", "pool_mean", "dropout",
}


def test_op_checks_cover_every_op_and_pass():
    results = check_op_gradients(seed=3)
    assert set(results) == EXPECTED_OPS
    for name, worst in results.items():
        assert worst < OP_TOLERANCE, f"{name}: {worst}"


def test_model_gradient_within_tolerance():
    worst = check_model_gradient(seed=1, sample_cap=120)
    assert worst < MODEL_TOLERANCE


def test_invariant_battery_reports_counts():
    stats = run_invariant_battery(cases=40, seed=2)
    assert stats["cases"] == 40
    assert stats["pairs"] >= 40


def test_random_instances_stay_small():
    rng = np.random.default_rng(8)
    for _ in range(100):
        inst = random_instance(rng)
        assert 2 <= len(inst.doc.entities) <= 4
        assert 1 <= len(inst.doc.sentences) <= 3
        for ent in inst.doc.entities:
            assert 1 <= len(ent.mentions) <= 3
        assert candidate_pairs(inst.doc)
        assert 4 <= inst.dims.model_dim <= 8
