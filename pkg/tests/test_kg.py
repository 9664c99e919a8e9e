"""Knowledge store: ingestion, top-K ranking, weighting, descriptions."""

import json
import math

import numpy as np
import pytest

from miuk.errors import ConfigError, FormatError
from miuk.kg import (
    NO_DESCRIPTION,
    PAD_CONCEPT,
    ConceptBundle,
    DescriptionStore,
    KnowledgeStore,
    weighting_scores,
)


def test_duplicate_triples_sum_counts():
    store = KnowledgeStore()
    store.ingest_triples(["a\tc\t3", "a\tc\t4"])
    assert store.concept_counts("a") == {"c": 7}


def test_empty_stream_yields_all_pad_bundles():
    store = KnowledgeStore()
    assert store.ingest_triples([]) == 0
    bundle = store.topk_concepts("anything", 3)
    assert bundle.concepts == (PAD_CONCEPT,) * 3
    assert bundle.weights == (0.0, 0.0, 0.0)
    assert bundle.is_pad == (True, True, True)


def test_topk_pads_short_lists_with_zero_weight():
    store = KnowledgeStore()
    store.ingest_triples(["e\tc1\t10", "e\tc2\t5"])
    bundle = store.topk_concepts("e", 3)
    assert bundle.concepts == ("c1", "c2", PAD_CONCEPT)
    assert bundle.is_pad == (False, False, True)
    assert bundle.weights[2] == 0.0
    assert sum(bundle.weights) == pytest.approx(1.0, abs=1e-9)


def test_topk_rejects_nonpositive_k():
    store = KnowledgeStore()
    for k in (0, -1):
        with pytest.raises(ConfigError):
            store.topk_concepts("e", k)


def test_topk_matches_sort_oracle_on_random_stores():
    rng = np.random.Generator(np.random.PCG64(31))
    store = KnowledgeStore()
    truth: dict[str, dict[str, int]] = {}
    lines = []
    for _ in range(1000):
        e = f"e{rng.integers(0, 40)}"
        c = f"c{rng.integers(0, 25)}"
        n = int(rng.integers(0, 500))
        truth.setdefault(e, {})
        truth[e][c] = truth[e].get(c, 0) + n
        lines.append(f"{e}\t{c}\t{n}")
    store.ingest_triples(lines)
    for e, per_entity in truth.items():
        for k in (1, 2, 3, 5):
            expected = sorted(per_entity.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
            got = store.topk_concepts(e, k)
            real = [(c, per_entity[c]) for c, pad in zip(got.concepts, got.is_pad) if not pad]
            assert real == expected


def test_topk_prefix_consistency():
    rng = np.random.Generator(np.random.PCG64(37))
    for _ in range(200):
        store = KnowledgeStore()
        n = int(rng.integers(0, 8))
        for i in range(n):
            store.add("e", f"c{i}", int(rng.integers(0, 50)))
        small = store.topk_concepts("e", 2)
        large = store.topk_concepts("e", 4)
        real_small = [c for c, pad in zip(small.concepts, small.is_pad) if not pad]
        real_large = [c for c, pad in zip(large.concepts, large.is_pad) if not pad]
        assert real_large[:len(real_small)] == real_small


def test_ingestion_is_order_independent():
    lines = [f"e{i % 5}\tc{j}\t{(i * 7 + j) % 90}" for i in range(30) for j in range(4)]
    a = KnowledgeStore()
    a.ingest_triples(lines)
    b = KnowledgeStore()
    b.ingest_triples(list(reversed(lines)))
    for e in a.entities():
        assert a.topk_concepts(e, 3) == b.topk_concepts(e, 3)


def test_equal_counts_tie_break_lexicographic():
    store = KnowledgeStore()
    store.ingest_triples(["e\tzeta\t5", "e\talpha\t5", "e\tmid\t5"])
    assert store.topk_concepts("e", 3).concepts == ("alpha", "mid", "zeta")


def test_malformed_lines_skipped_and_logged(caplog):
    store = KnowledgeStore()
    lines = ["a\tc\t3"] * 20 + ["bad line", "x\ty\tnotanumber"]
    with caplog.at_level("WARNING", logger="miuk.kg"):
        accepted = store.ingest_triples(lines)
    assert accepted == 20
    assert sum("rejected" in r.message for r in caplog.records) == 2


def test_too_many_malformed_lines_is_fatal():
    store = KnowledgeStore()
    lines = ["a\tc\t3"] * 5 + ["broken"] * 2
    with pytest.raises(FormatError, match="10%"):
        store.ingest_triples(lines)


def test_negative_count_rejected_as_malformed():
    store = KnowledgeStore()
    assert store.ingest_triples(["a\tc\t-3"] + ["a\tc\t1"] * 20) == 20
    assert store.concept_counts("a") == {"c": 20}


def test_triples_file_round_trip(tmp_path):
    path = tmp_path / "triples.tsv"
    path.write_text("paris\tcity\t120\nparis\tcapital\t80\n", encoding="utf-8")
    store = KnowledgeStore()
    assert store.ingest_triples(path) == 2
    assert store.topk_concepts("paris", 2).concepts == ("city", "capital")


def test_concept_vocabulary_puts_pad_first():
    store = KnowledgeStore()
    store.ingest_triples(["a\tzoo\t1", "b\tark\t2"])
    assert store.concept_vocabulary() == [PAD_CONCEPT, "ark", "zoo"]


# ---------------------------------------------------------------- weighting ----

def test_weighting_symmetric_counts_are_uniform():
    w = weighting_scores([7, 7, 7], [False, False, False])
    np.testing.assert_allclose(w, [1 / 3, 1 / 3, 1 / 3], atol=1e-12)


def test_weighting_single_support_gets_everything():
    w = weighting_scores([5, 0, 0], [False, True, True])
    np.testing.assert_array_equal(w, [1.0, 0.0, 0.0])


def test_weighting_matches_formula_oracle():
    w = weighting_scores([100, 10], [False, False])
    z = [math.log1p(100), math.log1p(10)]
    e = [math.exp(v - max(z)) for v in z]
    ref = [v / sum(e) for v in e]
    np.testing.assert_allclose(w, ref, atol=1e-12)


def test_weighting_raw_conditioning_skips_log():
    w = weighting_scores([3, 1], [False, False], conditioning="raw")
    ref = np.exp([0.0, -2.0])
    np.testing.assert_allclose(w, ref / ref.sum(), atol=1e-12)
    with pytest.raises(ConfigError):
        weighting_scores([1], [False], conditioning="sqrt")


def test_weighting_all_pad_is_all_zero():
    np.testing.assert_array_equal(weighting_scores([0, 0], [True, True]), [0.0, 0.0])


def test_weight_invariants_over_random_stores():
    rng = np.random.Generator(np.random.PCG64(41))
    for _ in range(1000):
        store = KnowledgeStore(conditioning="raw" if rng.random() < 0.3 else "log1p")
        for i in range(int(rng.integers(0, 6))):
            store.add("e", f"c{i}", int(rng.integers(0, 30)))
        k = int(rng.integers(1, 6))
        bundle = store.topk_concepts("e", k)
        w = np.array(bundle.weights)
        assert ((0.0 <= w) & (w <= 1.0)).all()
        total = w.sum()
        assert total == 0.0 or abs(total - 1.0) < 1e-9
        for weight, pad in zip(bundle.weights, bundle.is_pad):
            if pad:
                assert weight == 0.0


# -------------------------------------------------------------- descriptions ----

def test_description_lookup_prefers_stored_text():
    store = DescriptionStore()
    store.add("paris", "Paris is a capital city.")
    assert store.description("paris") == "Paris is a capital city."
    assert store.description("paris", entity_type="LOC") == "Paris is a capital city."


def test_description_falls_back_to_entity_type():
    store = DescriptionStore()
    assert store.description("atlantis", entity_type="LOC") == "LOC"
    store.add_type("mars", "PLANET")
    assert store.description("mars") == "PLANET"


def test_description_sentinel_when_nothing_known():
    assert DescriptionStore().description("nothing") == NO_DESCRIPTION


def test_description_files_round_trip(tmp_path):
    desp = tmp_path / "desp.jsonl"
    desp.write_text(
        json.dumps({"name": "a", "text": "alpha text"}) + "\n"
        + json.dumps({"name": "b", "text": "beta text"}) + "\n",
        encoding="utf-8")
    types = tmp_path / "types.tsv"
    types.write_text("a\tORG\nc\tPER\n", encoding="utf-8")
    store = DescriptionStore()
    assert store.load_descriptions(desp) == 2
    assert store.load_types(types) == 2
    assert store.description("a") == "alpha text"
    assert store.description("c") == "PER"
    assert store.lookup_type("a") == "ORG"


def test_description_file_errors(tmp_path):
    bad_json = tmp_path / "bad.jsonl"
    bad_json.write_text("{not json}\n", encoding="utf-8")
    with pytest.raises(FormatError, match="line 1"):
        DescriptionStore().load_descriptions(bad_json)
    missing_field = tmp_path / "missing.jsonl"
    missing_field.write_text(json.dumps({"name": "x"}) + "\n", encoding="utf-8")
    with pytest.raises(FormatError, match="name/text"):
        DescriptionStore().load_descriptions(missing_field)
    bad_tsv = tmp_path / "bad.tsv"
    bad_tsv.write_text("toomany\tfields\there\n", encoding="utf-8")
    with pytest.raises(FormatError):
        DescriptionStore().load_types(bad_tsv)


def test_bundle_is_hashable_value():
    b = ConceptBundle(("c", PAD_CONCEPT), (1.0, 0.0), (False, True))
    assert len(b) == 2
    assert b == ConceptBundle(("c", PAD_CONCEPT), (1.0, 0.0), (False, True))
