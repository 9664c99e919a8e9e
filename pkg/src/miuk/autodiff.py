"""Dense tensors with reverse-mode automatic differentiation.

CPU-only and deliberately small: vectors, matrices and one 3-tensor op,
with no broadcasting — every operation checks exact shapes and raises
:class:`ShapeError` on mismatch. Values are float32 in standard mode and
float64 in verification mode (see :func:`precision`); gradient checking
requires the 64-bit mode.

The computation graph is held implicitly by each :class:`Tensor` through
its parent links. ``backward()`` walks the graph in exact reverse
topological order (parents visited in creation order), so two identical
runs produce bit-identical gradients.
"""

from __future__ import annotations

import itertools
import struct
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, FormatError, NumericError, ShapeError

_node_counter = itertools.count()

_ACTIVE_DTYPE = np.dtype(np.float32)

_DTYPE_TAGS = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_TAG_DTYPES = {tag: dt for dt, tag in _DTYPE_TAGS.items()}

CHECKPOINT_MAGIC = b"MIUK"
CHECKPOINT_VERSION = 1


def active_dtype() -> np.dtype:
    """Dtype used for newly created leaf tensors."""
    return _ACTIVE_DTYPE


def set_precision(dtype) -> None:
    global _ACTIVE_DTYPE
    dt = np.dtype(dtype)
    if dt not in _DTYPE_TAGS:
        raise ConfigError(f"unsupported precision {dtype!r}; use float32 or float64")
    _ACTIVE_DTYPE = dt


@contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (verification mode = float64)."""
    previous = _ACTIVE_DTYPE
    set_precision(dtype)
    try:
        yield
    finally:
        set_precision(previous)


class Tensor:
    """A dense array that may participate in the differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple["Tensor", ...] = (), dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _ACTIVE_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.node_id = next(_node_counter)
        self._parents = parents
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every requires_grad ancestor.

        Repeated calls without zeroing keep accumulating.
        """
        if self.data.ndim != 0:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        order = _topo_order(self)
        self.grad = np.ones((), dtype=self.data.dtype)
        for node in reversed(order):
            if node.grad is not None and node._backward is not None:
                node._backward()

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"


def _topo_order(root: Tensor) -> list[Tensor]:
    # Iterative post-order DFS; parents precede consumers, order is
    # fully determined by the graph construction order.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


@dataclass(frozen=True)
class GraphRecord:
    node_id: int
    op: str
    parent_ids: tuple[int, ...]
    shape: tuple[int, ...]


class Graph:
    """Topologically ordered view of the operations reachable from a root."""

    def __init__(self, records: list[GraphRecord]):
        self.records = records

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        records = [
            GraphRecord(n.node_id, n.op, tuple(p.node_id for p in n._parents), n.shape)
            for n in _topo_order(root)
        ]
        return cls(records)

    def __len__(self):
        return len(self.records)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, op="const", dtype=dtype)


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype if dtype is not None else _ACTIVE_DTYPE))


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_shape(a, b, "add")
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad,
                 op="add", parents=(a, b), dtype=a.data.dtype)

    def _bw():
        if a.requires_grad:
            a._accum(out.grad)
        if b.requires_grad:
            b._accum(out.grad)

    out._backward = _bw
    return out


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data, requires_grad=a.requires_grad or b.requires_grad,
                 op="sub", parents=(a, b), dtype=a.data.dtype)

    def _bw():
        if a.requires_grad:
            a._accum(out.grad)
        if b.requires_grad:
            b._accum(-out.grad)

    out._backward = _bw
    return out


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data, requires_grad=a.requires_grad or b.requires_grad,
                 op="mul", parents=(a, b), dtype=a.data.dtype)

    def _bw():
        if a.requires_grad:
            a._accum(out.grad * b.data)
        if b.requires_grad:
            b._accum(out.grad * a.data)

    out._backward = _bw
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, requires_grad=a.requires_grad, op="neg", parents=(a,),
                 dtype=a.data.dtype)

    def _bw():
        if a.requires_grad:
            a._accum(-out.grad)

    out._backward = _bw
    return out


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = a.data.dtype.type(factor)
    out = Tensor(a.data * c, requires_grad=a.requires_grad, op="scale", parents=(a,),
                 dtype=a.data.dtype)

    def _bw():
        if a.requires_grad:
            a._accum(out.grad * c)

    out._backward = _bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix/vector product for rank (1|2) x (1|2) operands, no broadcasting."""
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ShapeError(f"matmul: ranks must be 1 or 2, got {a.shape} and {b.shape}")
    inner_a = a.shape[-1]
    inner_b = b.shape[0]
    if inner_a != inner_b:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data, requires_grad=a.requires_grad or b.requires_grad,
                 op="matmul", parents=(a, b), dtype=a.data.dtype)

    def _bw():
        g = out.grad
        if a.requires_grad:
            if a.data.ndim == 2 and b.data.ndim == 2:
                a._accum(g @ b.data.T)
            elif a.data.ndim == 2 and b.data.ndim == 1:
                a._accum(np.outer(g, b.data))
            elif a.data.ndim == 1 and b.data.ndim == 2:
                a._accum(b.data @ g)
            else:
                a._accum(g * b.data)
        if b.requires_grad:
            if a.data.ndim == 2 and b.data.ndim == 2:
                b._accum(a.data.T @ g)
            elif a.data.ndim == 2 and b.data.ndim == 1:
                b._accum(a.data.T @ g)
            elif a.data.ndim == 1 and b.data.ndim == 2:
                b._accum(np.outer(a.data, g))
            else:
                b._accum(g * a.data)

    out._backward = _bw
    return out


def bilinear(x: Tensor, w: Tensor, y: Tensor, b: Tensor) -> Tensor:
    """out[k] = sum_ij x[i] * w[i,k,j] * y[j] + b[k]."""
    if x.data.ndim != 1 or y.data.ndim != 1 or w.data.ndim != 3 or b.data.ndim != 1:
        raise ShapeError(
            f"bilinear: expected vector, 3-tensor, vector, vector; got "
            f"{x.shape}, {w.shape}, {y.shape}, {b.shape}")
    p, d, q = w.shape
    if x.shape[0] != p or y.shape[0] != q or b.shape[0] != d:
        raise ShapeError(
            f"bilinear: x {x.shape}, y {y.shape}, b {b.shape} do not conform to w {w.shape}")
    value = np.einsum("i,ikj,j->k", x.data, w.data, y.data) + b.data
    requires = x.requires_grad or w.requires_grad or y.requires_grad or b.requires_grad
    out = Tensor(value, requires_grad=requires, op="bilinear", parents=(x, w, y, b),
                 dtype=x.data.dtype)

    def _bw():
        g = out.grad
        if x.requires_grad:
            x._accum(np.einsum("k,ikj,j->i", g, w.data, y.data))
        if w.requires_grad:
            w._accum(np.einsum("i,k,j->ikj", x.data, g, y.data))
        if y.requires_grad:
            y._accum(np.einsum("k,ikj,i->j", g, w.data, x.data))
        if b.requires_grad:
            b._accum(g)

    out._backward = _bw
    return out


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    value = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(x.dtype)
    out = Tensor(value, requires_grad=a.requires_grad, op="sigmoid", parents=(a,),
                 dtype=x.dtype)

    def _bw():
        if a.requires_grad:
            a._accum(out.grad * value * (1.0 - value))

    out._backward = _bw
    return out


def softmax(v: Tensor, mask: np.ndarray | Sequence[bool] | None = None) -> Tensor:
    """Numerically stabilized softmax over a vector; masked entries are exactly 0."""
    if v.data.ndim != 1 or v.data.size == 0:
        raise ShapeError(f"softmax: expected a non-empty vector, got shape {v.shape}")
    if mask is not None:
        keep = np.asarray(mask, dtype=bool)
        if keep.shape != v.shape:
            raise ShapeError(f"softmax: mask shape {keep.shape} does not match {v.shape}")
        if not keep.any():
            raise NumericError("empty softmax support")
    else:
        keep = np.ones(v.shape, dtype=bool)
    x = v.data
    shifted = x - np.max(x[keep])
    e = np.exp(shifted)
    e = np.where(keep, e, 0.0)
    value = (e / e.sum()).astype(x.dtype)
    out = Tensor(value, requires_grad=v.requires_grad, op="softmax", parents=(v,),
                 dtype=x.dtype)

    def _bw():
        if v.requires_grad:
            g = out.grad
            # Masked outputs are 0, so the Jacobian formula zeroes them too.
            v._accum(value * (g - np.dot(g, value)))

    out._backward = _bw
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data), requires_grad=a.requires_grad, op="log", parents=(a,),
                 dtype=a.data.dtype)

    def _bw():
        if a.requires_grad:
            a._accum(out.grad / a.data)

    out._backward = _bw
    return out


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """Elementwise max(a, lo); gradient passes where a >= lo."""
    keep = a.data >= lo
    out = Tensor(np.where(keep, a.data, a.data.dtype.type(lo)),
                 requires_grad=a.requires_grad, op="clamp_min", parents=(a,),
                 dtype=a.data.dtype)

    def _bw():
        if a.requires_grad:
            a._accum(out.grad * keep)

    out._backward = _bw
    return out


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 1-D vectors in order; backward slices the gradient back."""
    if len(parts) == 0:
        raise ShapeError("concat: needs at least one part")
    for p in parts:
        if p.data.ndim != 1:
            raise ShapeError(f"concat: parts must be vectors, got shape {p.shape}")
    parts = tuple(parts)
    value = np.concatenate([p.data for p in parts])
    out = Tensor(value, requires_grad=any(p.requires_grad for p in parts),
                 op="concat", parents=parts, dtype=parts[0].data.dtype)
    offsets = np.cumsum([0] + [p.data.size for p in parts])

    def _bw():
        g = out.grad
        for i, p in enumerate(parts):
            if p.requires_grad:
                p._accum(g[offsets[i]:offsets[i + 1]])

    out._backward = _bw
    return out


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    """Stack equal-length vectors into a matrix, one per row."""
    if len(rows) == 0:
        raise ShapeError("stack_rows: needs at least one row")
    n = rows[0].data.size
    for r in rows:
        if r.data.ndim != 1 or r.data.size != n:
            raise ShapeError(f"stack_rows: rows must be vectors of length {n}, got {r.shape}")
    rows = tuple(rows)
    out = Tensor(np.stack([r.data for r in rows]),
                 requires_grad=any(r.requires_grad for r in rows),
                 op="stack_rows", parents=rows, dtype=rows[0].data.dtype)

    def _bw():
        g = out.grad
        for i, r in enumerate(rows):
            if r.requires_grad:
                r._accum(g[i])

    out._backward = _bw
    return out


def gather_rows(m: Tensor, indices: Sequence[int]) -> Tensor:
    """Select rows of a matrix by index (duplicates allowed)."""
    if m.data.ndim != 2:
        raise ShapeError(f"gather_rows: expected a matrix, got shape {m.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeError("gather_rows: needs at least one index")
    if idx.min() < 0 or idx.max() >= m.shape[0]:
        raise ShapeError(f"gather_rows: index out of range for {m.shape[0]} rows")
    out = Tensor(m.data[idx], requires_grad=m.requires_grad, op="gather_rows",
                 parents=(m,), dtype=m.data.dtype)

    def _bw():
        if m.requires_grad:
            g = np.zeros_like(m.data)
            np.add.at(g, idx, out.grad)
            m._accum(g)

    out._backward = _bw
    return out


def select_row(m: Tensor, index: int) -> Tensor:
    """Select one row of a matrix as a vector."""
    if m.data.ndim != 2:
        raise ShapeError(f"select_row: expected a matrix, got shape {m.shape}")
    if not 0 <= index < m.shape[0]:
        raise ShapeError(f"select_row: row {index} out of range for {m.shape[0]} rows")
    out = Tensor(m.data[index], requires_grad=m.requires_grad, op="select_row",
                 parents=(m,), dtype=m.data.dtype)

    def _bw():
        if m.requires_grad:
            g = np.zeros_like(m.data)
            g[index] = out.grad
            m._accum(g)

    out._backward = _bw
    return out


def add_rowvec(m: Tensor, v: Tensor) -> Tensor:
    """Add a vector to every row of a matrix (the one explicit row-repeat op)."""
    if m.data.ndim != 2 or v.data.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeError(f"add_rowvec: shapes {m.shape} and {v.shape} do not conform")
    out = Tensor(m.data + v.data[None, :], requires_grad=m.requires_grad or v.requires_grad,
                 op="add_rowvec", parents=(m, v), dtype=m.data.dtype)

    def _bw():
        if m.requires_grad:
            m._accum(out.grad)
        if v.requires_grad:
            v._accum(out.grad.sum(axis=0))

    out._backward = _bw
    return out


def pool(rows: Tensor, kind: str) -> Tensor:
    """Columnwise max or mean over the rows of a matrix.

    Max routes gradient to the first argmax row per column.
    """
    if rows.data.ndim != 2 or rows.shape[0] == 0:
        raise ShapeError(f"pool: expected a non-empty matrix, got shape {rows.shape}")
    if kind == "max":
        argmax = np.argmax(rows.data, axis=0)  # first occurrence wins
        value = rows.data[argmax, np.arange(rows.shape[1])]
        out = Tensor(value, requires_grad=rows.requires_grad, op="pool_max",
                     parents=(rows,), dtype=rows.data.dtype)

        def _bw():
            if rows.requires_grad:
                g = np.zeros_like(rows.data)
                g[argmax, np.arange(rows.shape[1])] = out.grad
                rows._accum(g)

    elif kind == "mean":
        value = rows.data.mean(axis=0)
        out = Tensor(value, requires_grad=rows.requires_grad, op="pool_mean",
                     parents=(rows,), dtype=rows.data.dtype)

        def _bw():
            if rows.requires_grad:
                rows._accum(np.repeat(out.grad[None, :], rows.shape[0], axis=0)
                            / rows.shape[0])

    else:
        raise ConfigError(f"pool: unknown kind {kind!r}")
    out._backward = _bw
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum(), requires_grad=a.requires_grad, op="sum", parents=(a,),
                 dtype=a.data.dtype)

    def _bw():
        if a.requires_grad:
            a._accum(np.full_like(a.data, out.grad))

    out._backward = _bw
    return out


def dropout(a: Tensor, ratio: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Zero elements with probability `ratio`, scaling survivors by 1/(1-ratio).

    The mask comes deterministically from `rng`; with training=False the
    input is returned unchanged.
    """
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"dropout ratio must be in [0, 1), got {ratio}")
    if not training or ratio == 0.0:
        return a
    keep = (rng.random(a.shape) >= ratio)
    factor = keep.astype(a.data.dtype) / a.data.dtype.type(1.0 - ratio)
    out = Tensor(a.data * factor, requires_grad=a.requires_grad, op="dropout",
                 parents=(a,), dtype=a.data.dtype)

    def _bw():
        if a.requires_grad:
            a._accum(out.grad * factor)

    out._backward = _bw
    return out


class ParamStore:
    """Named trainable tensors with persistent gradients and Adam state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._moment1: dict[str, np.ndarray] = {}
        self._moment2: dict[str, np.ndarray] = {}
        self.step_count = 0

    def create(self, name: str, data, dtype=None) -> Tensor:
        if name in self._params:
            raise ConfigError(f"parameter {name!r} already exists")
        t = Tensor(data, requires_grad=True, op=f"param:{name}", dtype=dtype)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def num_elements(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def adam_step(self, lr: float | Mapping[str, float], beta1: float = 0.9,
                  beta2: float = 0.999, eps: float = 1e-8) -> None:
        """One Adam update over all parameters with a gradient.

        `lr` is a single rate or a full name -> rate mapping (two-group
        training passes the mapping). Parameters are updated in creation
        order for determinism.
        """
        self.step_count += 1
        t = self.step_count
        for name, p in self._params.items():
            if p.grad is None:
                continue
            rate = lr[name] if isinstance(lr, Mapping) else lr
            g = p.grad
            m = self._moment1.get(name)
            v = self._moment2.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = beta1 * m + (1.0 - beta1) * g
            v = beta2 * v + (1.0 - beta2) * (g * g)
            self._moment1[name] = m
            self._moment2[name] = v
            m_hat = m / (1.0 - beta1 ** t)
            v_hat = v / (1.0 - beta2 ** t)
            p.data -= p.data.dtype.type(rate) * m_hat / (np.sqrt(v_hat) + eps)

    # Checkpoint layout (little-endian): magic "MIUK", version u32, count u32,
    # then per entry: name length u32 + UTF-8 name, dtype tag u8 (1=f32, 2=f64),
    # rank u8, dims u32 each, raw row-major values.
    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(self._params)))
            for name, t in self._params.items():
                raw = name.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<BB", _DTYPE_TAGS[t.data.dtype], t.data.ndim))
                for dim in t.data.shape:
                    fh.write(struct.pack("<I", dim))
                fh.write(np.ascontiguousarray(t.data, dtype=t.data.dtype.newbyteorder("<")).tobytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        store = cls()
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:4] != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic at byte 0: {blob[:4]!r}")
        pos = 4
        try:
            version, count = struct.unpack_from("<II", blob, pos)
            pos += 8
            if version != CHECKPOINT_VERSION:
                raise FormatError(f"unsupported checkpoint version {version}")
            for _ in range(count):
                (name_len,) = struct.unpack_from("<I", blob, pos)
                pos += 4
                name = blob[pos:pos + name_len].decode("utf-8")
                pos += name_len
                tag, rank = struct.unpack_from("<BB", blob, pos)
                pos += 2
                if tag not in _TAG_DTYPES:
                    raise FormatError(f"unknown dtype tag {tag} at byte {pos - 2}")
                dims = struct.unpack_from(f"<{rank}I", blob, pos) if rank else ()
                pos += 4 * rank
                dtype = _TAG_DTYPES[tag].newbyteorder("<")
                nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
                chunk = blob[pos:pos + nbytes]
                if len(chunk) != nbytes:
                    raise FormatError(f"truncated checkpoint at byte {pos}")
                pos += nbytes
                data = np.frombuffer(chunk, dtype=dtype).reshape(dims).astype(_TAG_DTYPES[tag])
                store.create(name, data, dtype=_TAG_DTYPES[tag])
        except struct.error as exc:
            raise FormatError(f"truncated checkpoint at byte {pos}") from exc
        return store


def grad_check(build_loss: Callable[[ParamStore], Tensor], params: ParamStore,
               eps: float = 1e-5, sample_cap: int = 10_000, seed: int = 0) -> float:
    """Compare analytic gradients to central finite differences.

    `build_loss` must deterministically rebuild the scalar loss from the
    current parameter values. Requires float64 parameters. Tensors larger
    than `sample_cap` elements are checked on a seeded random subsample.
    Returns the worst relative error, |a - n| / max(1, |a|, |n|).
    """
    for name, t in params.items():
        if t.data.dtype != np.float64:
            raise ConfigError(f"grad_check requires float64 parameters, {name!r} is {t.data.dtype}")
    params.zero_grad()
    loss = build_loss(params)
    if not np.isfinite(loss.data):
        raise NumericError("grad_check: loss is not finite")
    loss.backward()
    analytic = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for name, t in params.items()}
    rng = np.random.Generator(np.random.PCG64(seed))
    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        n = flat.size
        if n > sample_cap:
            idxs = np.sort(rng.choice(n, size=sample_cap, replace=False))
        else:
            idxs = np.arange(n)
        ref = analytic[name].reshape(-1)
        for i in idxs:
            original = flat[i]
            flat[i] = original + eps
            f_plus = float(build_loss(params).data)
            flat[i] = original - eps
            f_minus = float(build_loss(params).data)
            flat[i] = original
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(ref[i])
            if not (np.isfinite(numeric) and np.isfinite(a)):
                raise NumericError(f"grad_check: non-finite value for parameter {name!r}[{i}]")
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if err > worst:
                worst = err
    return worst
