"""Corpus model: IO, anchoring, distances, pair enumeration, synthetic data."""

import json

import numpy as np
import pytest

from miuk import corpus as cp
from miuk.errors import ConfigError, FormatError


def make_doc(doc_id="d0", sentences=None, entities=None, labels=None):
    return cp.Document(
        doc_id=doc_id,
        sentences=sentences if sentences is not None else [["a", "b", "c"]],
        entities=entities if entities is not None else [],
        labels=labels if labels is not None else [],
    )


def random_document(rng, min_entities=2, max_entities=4) -> cp.Document:
    n_sents = int(rng.integers(1, 5))
    sentences = [[f"tok{int(rng.integers(0, 30))}" for _ in range(int(rng.integers(3, 11)))]
                 for _ in range(n_sents)]
    n_entities = int(rng.integers(min_entities, max_entities + 1))
    entities = []
    for ei in range(n_entities):
        mentions = []
        for _ in range(int(rng.integers(1, 4))):
            si = int(rng.integers(0, n_sents))
            pos = int(rng.integers(0, len(sentences[si])))
            mentions.append(cp.Mention(si, pos, pos + 1))
        mentions.sort(key=lambda m: (m.sent_idx, m.start))
        entities.append(cp.EntityCluster(ei, f"e{ei}", "T", mentions))
    return cp.Document("rand", sentences, entities, [])


# ----------------------------------------------------------------- dataset IO ----

def test_empty_dataset_round_trip(tmp_path):
    path = tmp_path / "empty.json"
    path.write_text("[]", encoding="utf-8")
    assert cp.load_dataset(path) == []


def test_dataset_round_trip_is_identity(tmp_path):
    doc = make_doc(
        sentences=[["the", "city", "of", "paris", "shines"], ["france", "contains", "it"]],
        entities=[
            cp.EntityCluster(0, "paris", "LOC", [cp.Mention(0, 3, 4), cp.Mention(1, 2, 3)]),
            cp.EntityCluster(1, "france", "LOC", [cp.Mention(1, 0, 1)]),
        ],
        labels=[cp.RelationLabel(1, 0, frozenset({"contains", "capital"}))],
    )
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    cp.save_dataset([doc], p1)
    loaded = cp.load_dataset(p1)
    assert loaded == [doc]
    cp.save_dataset(loaded, p2)
    assert p1.read_text() == p2.read_text()


def test_load_rejects_bad_shapes(tmp_path):
    cases = [
        ("notalist.json", {"title": "x"}, "expected a JSON list"),
        ("missing.json", [{"title": "x", "sents": [[]]}], "missing field 'vertexSet'"),
        ("sents.json", [{"title": "x", "sents": "oops", "vertexSet": []}],
         r"document 0: sents"),
        ("empty_cluster.json", [{"title": "x", "sents": [["a"]], "vertexSet": [[]]}],
         r"vertexSet\[0\]"),
    ]
    for fname, payload, pattern in cases:
        path = tmp_path / fname
        path.write_text(json.dumps(payload), encoding="utf-8")
        with pytest.raises(FormatError, match=pattern):
            cp.load_dataset(path)


def test_load_rejects_out_of_range_span(tmp_path):
    payload = [{
        "title": "x",
        "sents": [["a", "b"]],
        "vertexSet": [[{"name": "e", "type": "T", "sent_id": 0, "pos": [1, 5]}]],
        "labels": [],
    }]
    path = tmp_path / "span.json"
    path.write_text(json.dumps(payload), encoding="utf-8")
    with pytest.raises(FormatError, match=r"vertexSet\[0\]\[0\]\.pos"):
        cp.load_dataset(path)


def test_load_merges_multi_relation_labels(tmp_path):
    payload = [{
        "title": "x",
        "sents": [["a", "b"]],
        "vertexSet": [
            [{"name": "h", "type": "T", "sent_id": 0, "pos": [0, 1]}],
            [{"name": "t", "type": "T", "sent_id": 0, "pos": [1, 2]}],
        ],
        "labels": [{"h": 0, "t": 1, "r": "r1"}, {"h": 0, "t": 1, "r": "r2"}],
    }]
    path = tmp_path / "multi.json"
    path.write_text(json.dumps(payload), encoding="utf-8")
    (doc,) = cp.load_dataset(path)
    assert doc.labels == [cp.RelationLabel(0, 1, frozenset({"r1", "r2"}))]


def test_validate_rejects_degenerate_labels():
    ents = [
        cp.EntityCluster(0, "a", "T", [cp.Mention(0, 0, 1)]),
        cp.EntityCluster(1, "b", "T", [cp.Mention(0, 1, 2)]),
    ]
    selfloop = make_doc(entities=ents, labels=[cp.RelationLabel(0, 0, frozenset({"r"}))])
    with pytest.raises(FormatError, match="head equals tail"):
        cp.validate_document(selfloop)
    emptyset = make_doc(entities=ents, labels=[cp.RelationLabel(0, 1, frozenset())])
    with pytest.raises(FormatError, match="empty relation set"):
        cp.validate_document(emptyset)
    unsorted = make_doc(entities=[
        cp.EntityCluster(0, "a", "T", [cp.Mention(0, 2, 3), cp.Mention(0, 0, 1)])])
    with pytest.raises(FormatError, match="not sorted"):
        cp.validate_document(unsorted)


# ------------------------------------------------------------------- anchors ----

def test_anchor_shared_across_mentions_of_one_entity():
    doc = make_doc(
        sentences=[["x", "paris", "y"], ["paris", "z"]],
        entities=[cp.EntityCluster(0, "paris", "LOC",
                                   [cp.Mention(0, 1, 2), cp.Mention(1, 0, 1)])],
    )
    adoc = cp.insert_anchors(doc)
    tok = cp.anchor_token(0)
    assert adoc.sentences[0] == ["x", tok, "paris", "y"]
    assert adoc.sentences[1] == [tok, "paris", "z"]
    assert [adoc.flat_tokens[p] for p in adoc.anchor_positions[0]] == [tok, tok]


def test_anchors_leave_mention_free_sentences_unchanged():
    doc = make_doc(
        sentences=[["just", "words"], ["with", "ent", "here"]],
        entities=[cp.EntityCluster(0, "ent", "T", [cp.Mention(1, 1, 2)])],
    )
    adoc = cp.insert_anchors(doc)
    assert adoc.sentences[0] == ["just", "words"]


def test_anchor_count_and_position_remap_on_random_docs():
    rng = np.random.Generator(np.random.PCG64(51))
    for _ in range(300):
        doc = random_document(rng)
        adoc = cp.insert_anchors(doc)
        total_mentions = sum(len(e.mentions) for e in doc.entities)
        assert len(adoc.flat_tokens) == sum(len(s) for s in doc.sentences) + total_mentions
        assert adoc.added_tokens == total_mentions
        flat_check = [t for s in adoc.sentences for t in s]
        assert flat_check == adoc.flat_tokens
        assert adoc.sent_offsets == list(
            np.cumsum([0] + [len(s) for s in adoc.sentences[:-1]]))
        for ent in doc.entities:
            for mi, m in enumerate(ent.mentions):
                original = doc.sentences[m.sent_idx][m.start:m.end]
                positions = adoc.mention_token_positions[ent.entity_index][mi]
                assert [adoc.flat_tokens[p] for p in positions] == original
                anchor_at = adoc.anchor_positions[ent.entity_index][mi]
                assert adoc.flat_tokens[anchor_at] == cp.anchor_token(ent.entity_index)
                assert anchor_at < positions[0]


# ----------------------------------------------------------------- distances ----

def test_min_distance_single_mentions():
    doc = make_doc(
        sentences=[["0", "1", "2", "3", "4", "5", "6", "7"]],
        entities=[
            cp.EntityCluster(0, "h", "T", [cp.Mention(0, 1, 2)]),
            cp.EntityCluster(1, "t", "T", [cp.Mention(0, 6, 7)]),
        ],
    )
    adoc = cp.insert_anchors(doc)
    d = cp.min_distance(adoc, 0, 1)
    # Anchored layout: ⟦E0⟧ at 1, ⟦E1⟧ at 7 -> signed gap 6.
    assert d == 6
    assert cp.min_distance(adoc, 1, 0) == -6


def test_min_distance_antisymmetry_and_magnitude_oracle():
    rng = np.random.Generator(np.random.PCG64(53))
    for _ in range(1000):
        doc = random_document(rng)
        adoc = cp.insert_anchors(doc)
        p = len(doc.entities)
        for h in range(p):
            for t in range(h + 1, p):
                d = cp.min_distance(adoc, h, t)
                assert d == -cp.min_distance(adoc, t, h)
                offs_h = adoc.anchor_positions[h]
                offs_t = adoc.anchor_positions[t]
                diffs = [ot - oh for oh in offs_h for ot in offs_t]
                assert abs(d) == min(abs(x) for x in diffs)
                assert d in diffs


def test_min_distance_rejects_self_pair():
    doc = make_doc(entities=[cp.EntityCluster(0, "a", "T", [cp.Mention(0, 0, 1)])])
    with pytest.raises(ConfigError):
        cp.min_distance(cp.insert_anchors(doc), 0, 0)


def test_distance_clamp_and_index_bounds():
    assert cp.clamp_distance(600) == 512
    assert cp.clamp_distance(-600) == -512
    assert cp.clamp_distance(3) == 3
    assert cp.distance_index(-10_000) == 0
    assert cp.distance_index(0) == 512
    assert cp.distance_index(10_000) == 1024
    assert cp.DISTANCE_TABLE_SIZE == 1025


# --------------------------------------------------------------------- pairs ----

def test_candidate_pairs_counts():
    def doc_with(p):
        ents = [cp.EntityCluster(i, f"e{i}", "T", [cp.Mention(0, i, i + 1)])
                for i in range(p)]
        return make_doc(sentences=[[f"t{i}" for i in range(p + 1)]], entities=ents)

    assert cp.candidate_pairs(doc_with(1)) == []
    assert cp.candidate_pairs(doc_with(2)) == [(0, 1), (1, 0)]
    pairs = cp.candidate_pairs(doc_with(5))
    assert len(pairs) == 20
    assert pairs == sorted(pairs)
    assert all(h != t for h, t in pairs)


# ---------------------------------------------------------- relation vocab ----

def test_collect_relations_appearance_order():
    docs = [
        make_doc(entities=[
            cp.EntityCluster(0, "a", "T", [cp.Mention(0, 0, 1)]),
            cp.EntityCluster(1, "b", "T", [cp.Mention(0, 1, 2)]),
        ], labels=[cp.RelationLabel(0, 1, frozenset({"zeta", "alpha"}))]),
        make_doc(entities=[
            cp.EntityCluster(0, "a", "T", [cp.Mention(0, 0, 1)]),
            cp.EntityCluster(1, "b", "T", [cp.Mention(0, 1, 2)]),
        ], labels=[cp.RelationLabel(1, 0, frozenset({"beta", "alpha"}))]),
    ]
    assert cp.collect_relations(docs) == ["alpha", "zeta", "beta"]


def test_rel2id_round_trip_and_validation(tmp_path):
    path = tmp_path / "rel2id.json"
    cp.save_rel2id(["r0", "r1", "r2"], path)
    assert cp.load_rel2id(path) == {"r0": 0, "r1": 1, "r2": 2}
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"a": 0, "b": 2}), encoding="utf-8")
    with pytest.raises(FormatError, match="ids"):
        cp.load_rel2id(bad)


# ----------------------------------------------------------- synthetic corpus ----

def small_config(**overrides):
    base = dict(num_concepts=4, entities_per_concept=3, num_relation_types=3,
                num_documents=12, sentences_per_document=3, mentions_per_entity=2,
                entities_per_document=4, prior_dominance=0.5, relation_density=0.4)
    base.update(overrides)
    return cp.SyntheticConfig(**base)


def corpus_fingerprint(corpus):
    docs = json.dumps([cp._document_to_json(d) for d in corpus.documents], sort_keys=True)
    return (docs, tuple(corpus.triples), tuple(corpus.entity_types),
            json.dumps(corpus.rules, sort_keys=True))


def test_synthetic_generation_is_deterministic():
    a = cp.generate_synthetic(small_config(), seed=99)
    b = cp.generate_synthetic(small_config(), seed=99)
    assert corpus_fingerprint(a) == corpus_fingerprint(b)
    c = cp.generate_synthetic(small_config(), seed=100)
    assert corpus_fingerprint(a) != corpus_fingerprint(c)


def test_synthetic_documents_validate_and_label_by_rule_table():
    corpus = cp.generate_synthetic(small_config(num_documents=25), seed=7)
    assert len(corpus.documents) == 25
    for doc in corpus.documents:
        cp.validate_document(doc)
        expected = {}
        for h, t in cp.candidate_pairs(doc):
            key = (f"{corpus.primary_concept[doc.entities[h].name]}"
                   f"|{corpus.primary_concept[doc.entities[t].name]}")
            rel = corpus.rules.get(key)
            if rel is not None:
                expected[(h, t)] = frozenset({rel})
        got = {(lab.head, lab.tail): lab.relations for lab in doc.labels}
        assert got == expected


def test_synthetic_zero_prior_dominance_always_plants_triggers():
    corpus = cp.generate_synthetic(small_config(prior_dominance=0.0, num_documents=20),
                                   seed=13)
    for doc in corpus.documents:
        for lab in doc.labels:
            (rel,) = lab.relations
            trigger = f"TRIG_{rel}"
            head_sents = {m.sent_idx for m in doc.entities[lab.head].mentions}
            assert any(trigger in doc.sentences[si] for si in head_sents)


def test_synthetic_full_prior_dominance_never_plants_triggers():
    corpus = cp.generate_synthetic(small_config(prior_dominance=1.0, num_documents=20),
                                   seed=13)
    for doc in corpus.documents:
        for sent in doc.sentences:
            assert not any(tok.startswith("TRIG_") for tok in sent)


def test_synthetic_generic_mentions_hide_entity_names():
    corpus = cp.generate_synthetic(small_config(generic_mentions=True), seed=3)
    for doc in corpus.documents:
        for ent in doc.entities:
            for m in ent.mentions:
                assert doc.sentences[m.sent_idx][m.start] == "ENT"
        # entity names still drive the KG side
        assert all(ent.name.startswith("ent_") for ent in doc.entities)


def test_synthetic_triples_cover_every_entity_with_dominant_concept():
    corpus = cp.generate_synthetic(small_config(), seed=5)
    by_entity: dict[str, dict[str, int]] = {}
    for line in corpus.triples:
        e, c, n = line.split("\t")
        by_entity.setdefault(e, {})[c] = by_entity.get(e, {}).get(c, 0) + int(n)
    for name, concept in corpus.primary_concept.items():
        counts = by_entity[name]
        assert max(counts, key=lambda c: (counts[c], c)) == concept
        assert 1 <= len(counts) <= 5


def test_synthetic_config_validation():
    with pytest.raises(ConfigError, match="num_relation_types"):
        cp.generate_synthetic(small_config(num_relation_types=0), seed=1)
    with pytest.raises(ConfigError, match="prior_dominance"):
        cp.generate_synthetic(small_config(prior_dominance=1.5), seed=1)
    with pytest.raises(ConfigError, match="entities_per_document"):
        cp.generate_synthetic(small_config(entities_per_document=1), seed=1)


def test_synthetic_write_emits_loadable_files(tmp_path):
    corpus = cp.generate_synthetic(small_config(num_documents=5), seed=21)
    paths = corpus.write(tmp_path / "out")
    for p in paths.values():
        assert p.exists()
    docs = cp.load_dataset(paths["dataset"])
    assert docs == corpus.documents
    manifest = json.loads(paths["manifest"].read_text())
    assert manifest["seed"] == 21
    assert manifest["num_documents"] == 5
    rules = json.loads(paths["rules"].read_text())
    assert rules == corpus.rules
