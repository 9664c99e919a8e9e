"""Encoder: hash embeddings, projection, pooling recipes, precomputed files."""

import numpy as np
import pytest

from miuk import autodiff as ad
from miuk import encoder as enc
from miuk.errors import CompatibilityError, ConfigError, FormatError, ShapeError
from miuk.kg import NO_DESCRIPTION


class StubEmbedder:
    """Fixed small table standing in for the hash embedder in unit tests."""

    kind = "hash"

    def __init__(self, table: dict[str, list[float]]):
        self._table = {k: np.asarray(v, dtype=np.float64) for k, v in table.items()}
        self.base_dim = len(next(iter(self._table.values())))

    def vector(self, token: str) -> np.ndarray:
        return self._table[token]


def make_encoder(d=2, base=None, dropout=0.0, dtype=np.float64):
    base = base if base is not None else StubEmbedder({
        "a": [1.0, 0.0, 0.0], "b": [0.0, 1.0, 0.0], "c": [0.0, 0.0, 1.0]})
    rng = np.random.Generator(np.random.PCG64(77))
    w = ad.tensor(rng.standard_normal((base.base_dim, d)), requires_grad=True, dtype=dtype)
    b = ad.tensor(rng.standard_normal(d), requires_grad=True, dtype=dtype)
    return enc.Encoder(base, w, b, dropout_ratio=dropout)


# ------------------------------------------------------------- hash embedder ----

def test_hash_vectors_are_deterministic():
    e = enc.HashEmbedder(base_dim=16, seed=42)
    np.testing.assert_array_equal(e.vector("paris"), e.vector("paris"))
    again = enc.HashEmbedder(base_dim=16, seed=42)
    np.testing.assert_array_equal(e.vector("paris"), again.vector("paris"))


def test_hash_vectors_differ_across_tokens_and_seeds():
    e = enc.HashEmbedder(base_dim=16, seed=42)
    assert not np.array_equal(e.vector("paris"), e.vector("tokyo"))
    other = enc.HashEmbedder(base_dim=16, seed=43)
    assert not np.array_equal(e.vector("paris"), other.vector("paris"))


def test_hash_vector_statistics_over_10k_tokens():
    e = enc.HashEmbedder(base_dim=768, seed=7)
    sample = np.stack([e.vector(f"token_{i}") for i in range(10_000)])
    means = sample.mean(axis=0)
    variances = sample.var(axis=0)
    assert np.abs(means).max() < 0.05
    assert np.abs(variances - 1.0).max() < 0.05
    assert np.abs(sample).max() < np.sqrt(3.0) + 1e-12


def test_hash_rejects_bad_dim():
    with pytest.raises(ConfigError):
        enc.HashEmbedder(base_dim=0)


# ---------------------------------------------------------------- projection ----

def test_encode_identical_tokens_get_identical_rows():
    encoder = make_encoder()
    out = encoder.encode(["a", "b", "a"])
    np.testing.assert_array_equal(out.vectors.data[0], out.vectors.data[2])
    assert out.tokens == ["a", "b", "a"]
    assert out.vectors.shape == (3, 2)


def test_encode_zero_projection_gives_zero_rows():
    base = StubEmbedder({"a": [1.0, 2.0]})
    w = ad.tensor(np.zeros((2, 3)), requires_grad=True, dtype=np.float64)
    b = ad.tensor(np.zeros(3), requires_grad=True, dtype=np.float64)
    out = enc.Encoder(base, w, b).encode(["a", "a"])
    np.testing.assert_array_equal(out.vectors.data, np.zeros((2, 3)))


def test_encode_matches_hand_affine():
    base = StubEmbedder({"x": [1.0, 2.0], "y": [-1.0, 0.5]})
    w = ad.tensor([[1.0, 0.0], [0.0, 2.0]], dtype=np.float64, requires_grad=True)
    b = ad.tensor([0.5, -0.5], dtype=np.float64, requires_grad=True)
    out = enc.Encoder(base, w, b).encode(["x", "y"])
    np.testing.assert_allclose(out.vectors.data, [[1.5, 3.5], [-0.5, 0.5]], atol=1e-12)


def test_encode_empty_sequence_rejected():
    with pytest.raises(ShapeError):
        make_encoder().encode([])


def test_encode_shape_validation():
    base = StubEmbedder({"a": [1.0, 2.0]})
    w = ad.tensor(np.zeros((3, 4)), dtype=np.float64)  # base_dim mismatch
    b = ad.tensor(np.zeros(4), dtype=np.float64)
    with pytest.raises(ConfigError):
        enc.Encoder(base, w, b)
    with pytest.raises(ShapeError):
        enc.Encoder(base, ad.tensor(np.zeros((2, 4)), dtype=np.float64),
                    ad.tensor(np.zeros(3), dtype=np.float64))


def test_encode_dropout_only_in_training():
    encoder = make_encoder(d=8, dropout=0.5)
    tokens = ["a", "b", "c"] * 10
    eval_out = encoder.encode(tokens, training=False)
    assert not (eval_out.vectors.data == 0.0).any()
    rng = np.random.Generator(np.random.PCG64(5))
    train_out = encoder.encode(tokens, rng=rng, training=True)
    assert (train_out.vectors.data == 0.0).any()
    with pytest.raises(ConfigError):
        encoder.encode(tokens, training=True)


def test_encode_is_bit_deterministic():
    a = make_encoder().encode(["a", "b", "c"]).vectors.data.tobytes()
    b = make_encoder().encode(["a", "b", "c"]).vectors.data.tobytes()
    assert a == b


def test_projection_receives_gradient_but_base_does_not():
    with ad.precision(np.float64):
        encoder = make_encoder()
        out = encoder.encode(["a", "b"])
        ad.sum_all(out.vectors).backward()
    assert encoder.proj_w.grad is not None
    assert encoder.proj_b.grad is not None
    # the base rows enter as a constant leaf: add_rowvec(matmul(rows, W), b)
    base_node = out.vectors._parents[0]._parents[0]
    assert base_node.op == "const" and base_node.grad is None


def test_projection_grad_check():
    with ad.precision(np.float64):
        store = ad.ParamStore()
        rng = np.random.Generator(np.random.PCG64(9))
        store.create("proj.W", rng.standard_normal((3, 4)) * 0.3)
        store.create("proj.b", rng.standard_normal(4) * 0.1)
        base = StubEmbedder({"a": [1.0, 0.2, -0.5], "b": [0.0, 1.0, 0.7]})

        def loss(ps):
            encoder = enc.Encoder(base, ps["proj.W"], ps["proj.b"])
            out = encoder.encode(["a", "b", "a"])
            return ad.sum_all(ad.sigmoid(ad.pool(out.vectors, "max")))

        assert ad.grad_check(loss, store) < 1e-6


# ------------------------------------------------------------------- pooling ----

def test_mention_embedding_one_token_is_halved_sum():
    vectors = ad.tensor([[2.0, 0.0], [4.0, 6.0], [0.0, 0.0]], dtype=np.float64)
    ctx = enc.ContextEncoding(tokens=["anch", "word", "pad"], vectors=vectors)
    out = enc.mention_embedding(ctx, anchor_position=0, token_positions=[1])
    np.testing.assert_allclose(out.data, [3.0, 3.0])


def test_mention_embedding_matches_mean_oracle_and_permutation():
    rng = np.random.Generator(np.random.PCG64(15))
    for _ in range(100):
        rows = rng.standard_normal((6, 4))
        ctx = enc.ContextEncoding(tokens=list("abcdef"),
                                  vectors=ad.tensor(rows, dtype=np.float64))
        out = enc.mention_embedding(ctx, 0, [2, 3, 4])
        np.testing.assert_allclose(out.data, rows[[0, 2, 3, 4]].mean(axis=0), atol=1e-12)
        permuted = enc.mention_embedding(ctx, 0, [4, 2, 3])
        np.testing.assert_allclose(out.data, permuted.data, atol=1e-12)


def test_sentence_representation_max_semantics():
    rows = np.array([[1.0, 5.0], [4.0, 2.0], [9.0, 9.0]])
    ctx = enc.ContextEncoding(tokens=["a", "b", "c"],
                              vectors=ad.tensor(rows, dtype=np.float64))
    np.testing.assert_allclose(enc.sentence_representation(ctx, (0, 1)).data, [1.0, 5.0])
    np.testing.assert_allclose(enc.sentence_representation(ctx, (0, 2)).data, [4.0, 5.0])
    np.testing.assert_allclose(enc.sentence_representation(ctx, (0, 3)).data, [9.0, 9.0])
    # excluding the dominating row changes the pool
    np.testing.assert_allclose(
        enc.sentence_representation(ctx, (0, 3), exclude={2}).data, [4.0, 5.0])
    with pytest.raises(ShapeError):
        enc.sentence_representation(ctx, (1, 1))


def test_sentence_representation_dominates_rows_property():
    rng = np.random.Generator(np.random.PCG64(19))
    for _ in range(200):
        n = int(rng.integers(1, 7))
        rows = rng.standard_normal((n, 5))
        ctx = enc.ContextEncoding(tokens=[f"t{i}" for i in range(n)],
                                  vectors=ad.tensor(rows, dtype=np.float64))
        pooled = enc.sentence_representation(ctx, (0, n)).data
        np.testing.assert_allclose(pooled, rows.max(axis=0), atol=1e-12)
        assert (pooled[None, :] >= rows - 1e-12).all()


# -------------------------------------------------------------- descriptions ----

def test_description_sentinel_is_zero_vector():
    encoder = make_encoder()
    out = encoder.description_vector(NO_DESCRIPTION)
    np.testing.assert_array_equal(out.data, np.zeros(2))
    np.testing.assert_array_equal(encoder.description_vector("   ").data, np.zeros(2))


def test_description_single_token_equals_projected_row():
    encoder = make_encoder()
    single = encoder.description_vector("a")
    row = encoder.encode(["a"]).vectors.data[0]
    np.testing.assert_allclose(single.data, row, atol=1e-12)


def test_description_repeated_token_matches_single():
    encoder = make_encoder()
    np.testing.assert_allclose(encoder.description_vector("b b b b").data,
                               encoder.description_vector("b").data, atol=1e-12)


def test_description_truncates_long_text():
    table = {f"t{i}": [float(i), 0.0] for i in range(300)}
    base = StubEmbedder(table)
    w = ad.tensor(np.eye(2), dtype=np.float64)
    b = ad.tensor(np.zeros(2), dtype=np.float64)
    encoder = enc.Encoder(base, w, b)
    text = " ".join(f"t{i}" for i in range(300))
    out = encoder.description_vector(text)
    # tokens t128..t299 are beyond the cap, so the max stops at t127
    assert out.data[0] == 127.0


# ----------------------------------------------------------- precomputed files ----

def test_precomputed_round_trip(tmp_path):
    rng = np.random.Generator(np.random.PCG64(23))
    table = {f"tok{i}": rng.standard_normal(6).astype(np.float32) for i in range(20)}
    path = tmp_path / "vectors.emb"
    enc.write_embedding_file(path, 6, table)
    loaded = enc.load_precomputed(path)
    assert loaded.base_dim == 6
    assert len(loaded) == 20
    for token, vec in table.items():
        np.testing.assert_array_equal(loaded.vector(token), vec.astype(np.float64))


def test_precomputed_missing_token_named(tmp_path):
    path = tmp_path / "empty.emb"
    enc.write_embedding_file(path, 4, {})
    loaded = enc.load_precomputed(path)
    with pytest.raises(CompatibilityError, match="ghost"):
        loaded.vector("ghost")


def test_precomputed_bad_magic_and_truncation(tmp_path):
    bad = tmp_path / "bad.emb"
    bad.write_bytes(b"XXXX" + b"\x00" * 8)
    with pytest.raises(FormatError, match="byte 0"):
        enc.load_precomputed(bad)
    path = tmp_path / "ok.emb"
    enc.write_embedding_file(path, 4, {"a": np.ones(4, dtype=np.float32)})
    clipped = tmp_path / "clipped.emb"
    clipped.write_bytes(path.read_bytes()[:-6])
    with pytest.raises(FormatError, match="truncated"):
        enc.load_precomputed(clipped)


def test_build_embedder_validation(tmp_path):
    assert isinstance(enc.build_embedder("hash", base_dim=8, seed=1), enc.HashEmbedder)
    with pytest.raises(ConfigError):
        enc.build_embedder("hash", path=tmp_path / "x.emb")
    with pytest.raises(ConfigError):
        enc.build_embedder("precomputed")
    path = tmp_path / "v.emb"
    enc.write_embedding_file(path, 4, {"a": np.ones(4, dtype=np.float32)})
    loaded = enc.build_embedder("precomputed", base_dim=4, path=path)
    assert isinstance(loaded, enc.PrecomputedEmbedder)
    with pytest.raises(ConfigError, match="base_dim"):
        enc.build_embedder("precomputed", base_dim=8, path=path)
    with pytest.raises(ConfigError):
        enc.build_embedder("transformer")
