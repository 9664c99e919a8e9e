"""Token encoding: frozen base embeddings plus a trainable projection.

A desk-scale stand-in for a pretrained contextual encoder. Base vectors
come either from a keyed hash (deterministic pseudo-random, approximately
unit variance per dimension) or from a precomputed binary file produced
offline; they carry no gradient. A single shared linear projection maps
them to model dimension d, and the same instance encodes both context
sentences and description texts.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import CompatibilityError, ConfigError, FormatError, ShapeError
from .kg import NO_DESCRIPTION

DESCRIPTION_TOKEN_LIMIT = 128

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

EMBEDDING_MAGIC = b"EMB1"


class HashEmbedder:
    """Deterministic per-token base vectors from a keyed 64-bit hash.

    Values are uniform on [-sqrt(3), sqrt(3)), which gives zero mean and
    unit variance per dimension. The same (seed, token) always produces
    the same vector.
    """

    kind = "hash"

    def __init__(self, base_dim: int = 768, seed: int = 0):
        if base_dim < 1:
            raise ConfigError(f"base_dim must be positive, got {base_dim}")
        self.base_dim = base_dim
        self.seed = seed
        self._key = int(seed).to_bytes(8, "little", signed=False)
        self._cache: dict[str, np.ndarray] = {}

    def vector(self, token: str) -> np.ndarray:
        cached = self._cache.get(token)
        if cached is not None:
            return cached
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8,
                                 key=self._key).digest()
        state = np.uint64(int.from_bytes(digest, "little"))
        idx = np.arange(1, self.base_dim + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = state + _GOLDEN * idx
            z = (z ^ (z >> np.uint64(30))) * _MIX1
            z = (z ^ (z >> np.uint64(27))) * _MIX2
            z = z ^ (z >> np.uint64(31))
        uniform = (z >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        vec = (2.0 * uniform - 1.0) * np.sqrt(3.0)
        self._cache[token] = vec
        return vec


class PrecomputedEmbedder:
    """Exact-lookup base vectors loaded from an offline file."""

    kind = "precomputed"

    def __init__(self, base_dim: int, table: dict[str, np.ndarray]):
        self.base_dim = base_dim
        self._table = table

    def __len__(self) -> int:
        return len(self._table)

    def vector(self, token: str) -> np.ndarray:
        vec = self._table.get(token)
        if vec is None:
            raise CompatibilityError(f"no precomputed embedding for token {token!r}")
        return vec


def write_embedding_file(path: str | Path, base_dim: int,
                         table: dict[str, np.ndarray]) -> None:
    """Binary layout: magic, base_dim u32, count u32, then per token a
    u32-length UTF-8 name and base_dim float32 values (little-endian)."""
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<II", base_dim, len(table)))
        for token, vec in table.items():
            vec = np.asarray(vec, dtype="<f4")
            if vec.shape != (base_dim,):
                raise ConfigError(f"vector for {token!r} has shape {vec.shape}, "
                                  f"expected ({base_dim},)")
            raw = token.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(vec.tobytes())


def load_precomputed(path: str | Path) -> PrecomputedEmbedder:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != EMBEDDING_MAGIC:
        raise FormatError(f"bad embedding magic at byte 0: {blob[:4]!r}")
    pos = 4
    try:
        base_dim, count = struct.unpack_from("<II", blob, pos)
        pos += 8
        table: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            token = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            nbytes = base_dim * 4
            chunk = blob[pos:pos + nbytes]
            if len(chunk) != nbytes:
                raise FormatError(f"truncated embedding file at byte {pos}")
            table[token] = np.frombuffer(chunk, dtype="<f4").astype(np.float64)
            pos += nbytes
    except struct.error as exc:
        raise FormatError(f"truncated embedding file at byte {pos}") from exc
    return PrecomputedEmbedder(base_dim, table)


def build_embedder(kind: str, base_dim: int = 768, seed: int = 0,
                   path: str | Path | None = None):
    """CLI-facing factory; rejects mixed hash/precomputed settings."""
    if kind == "hash":
        if path is not None:
            raise ConfigError("hash embedder does not take an embedding file")
        return HashEmbedder(base_dim=base_dim, seed=seed)
    if kind == "precomputed":
        if path is None:
            raise ConfigError("precomputed embedder requires an embedding file")
        emb = load_precomputed(path)
        if base_dim and emb.base_dim != base_dim:
            raise ConfigError(
                f"embedding file has base_dim {emb.base_dim}, config says {base_dim}")
        return emb
    raise ConfigError(f"unknown embedder kind {kind!r}; choose hash or precomputed")


@dataclass
class ContextEncoding:
    """Projected vectors for one token sequence (row i belongs to token i)."""

    tokens: list[str]
    vectors: ad.Tensor
    sent_spans: list[tuple[int, int]] | None = None


class Encoder:
    """Shared projection over frozen base embeddings."""

    def __init__(self, embedder, proj_w: ad.Tensor, proj_b: ad.Tensor,
                 dropout_ratio: float = 0.0):
        if proj_w.data.ndim != 2 or proj_b.data.ndim != 1 \
                or proj_w.shape[1] != proj_b.shape[0]:
            raise ShapeError(f"projection shapes {proj_w.shape} / {proj_b.shape} "
                             "do not conform")
        if proj_w.shape[0] != embedder.base_dim:
            raise ConfigError(f"projection expects base_dim {proj_w.shape[0]}, "
                              f"embedder provides {embedder.base_dim}")
        self.embedder = embedder
        self.proj_w = proj_w
        self.proj_b = proj_b
        self.dropout_ratio = dropout_ratio

    @property
    def model_dim(self) -> int:
        return self.proj_w.shape[1]

    def encode(self, tokens: list[str], sent_spans=None,
               rng: np.random.Generator | None = None,
               training: bool = False) -> ContextEncoding:
        if not tokens:
            raise ShapeError("cannot encode an empty token sequence")
        base = np.stack([self.embedder.vector(t) for t in tokens])
        rows = ad.constant(base.astype(ad.active_dtype()))
        projected = ad.add_rowvec(ad.matmul(rows, self.proj_w), self.proj_b)
        if training and self.dropout_ratio > 0.0:
            if rng is None:
                raise ConfigError("training-mode encoding needs a dropout rng")
            projected = ad.dropout(projected, self.dropout_ratio, rng, training=True)
        return ContextEncoding(tokens=list(tokens), vectors=projected,
                               sent_spans=sent_spans)

    def description_vector(self, text: str, rng=None, training: bool = False) -> ad.Tensor:
        """Encode a description and max-pool it; the no-description
        sentinel (or blank text) becomes an exact zero vector."""
        if text == NO_DESCRIPTION:
            return ad.zeros((self.model_dim,))
        tokens = text.split()[:DESCRIPTION_TOKEN_LIMIT]
        if not tokens:
            return ad.zeros((self.model_dim,))
        enc = self.encode(tokens, rng=rng, training=training)
        return ad.pool(enc.vectors, "max")


def mention_embedding(enc: ContextEncoding, anchor_position: int,
                      token_positions: list[int]) -> ad.Tensor:
    """Mean over the anchor row and the mention's token rows."""
    return ad.pool(ad.gather_rows(enc.vectors, [anchor_position] + list(token_positions)),
                   "mean")


def sentence_representation(enc: ContextEncoding, span: tuple[int, int],
                            exclude: frozenset[int] | set[int] = frozenset()) -> ad.Tensor:
    """Columnwise max over the sentence's rows, minus excluded offsets."""
    start, end = span
    positions = [p for p in range(start, end) if p not in exclude]
    if not positions:
        raise ShapeError(f"sentence span [{start}, {end}) has no tokens to pool")
    return ad.pool(ad.gather_rows(enc.vectors, positions), "max")
