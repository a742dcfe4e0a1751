"""Dense float64 tensors with reverse-mode automatic differentiation.

The branching networks in this package need a small, fixed set of
operations (matrix products, masked softmax, layer norm, gather/scatter,
reductions) with exact repeatability: float64 everywhere, deterministic
forward passes, and hard failure on any non-finite intermediate.  This
module provides exactly that, plus a named parameter store with Adam
state and a binary checkpoint format that round-trips bit for bit.

Gradients are accumulated by walking the recorded computation graph in
reverse topological order from a scalar loss.  Operations executed inside
a ``no_grad()`` block record nothing and produce plain leaf tensors.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "backward",
    "ParameterStore",
    "adam_step",
    "add",
    "sub",
    "neg",
    "mul",
    "scale",
    "matmul",
    "relu",
    "softmax",
    "layer_norm",
    "concat",
    "mean",
    "max_reduce",
    "sum_all",
    "embedding_lookup",
    "scatter_sum",
    "tile_rows",
    "scaled_dot_attention",
    "glorot_uniform",
]

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self) -> "no_grad":
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc) -> bool:
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A dense float64 array plus an optional backprop closure.

    ``values`` must stay finite; every constructor and every op checks and
    raises ``FloatingPointError`` otherwise.  ``grad`` is lazily allocated
    with the same shape as ``values``.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        values,
        requires_grad: bool = False,
        _parents: tuple = (),
        _backward: Callable[[np.ndarray], None] | None = None,
    ) -> None:
        arr = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("tensor contains NaN or Inf")
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


def _make(values: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Create an op result, recording the graph only when gradients are on."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(values, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)
    return Tensor(values)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.values + b.values

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.values.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.values.shape))

    return _make(out, (a, b), backward_fn)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(-g)

    return _make(-a.values, (a,), backward_fn)


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.values * b.values

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.values, a.values.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.values, b.values.shape))

    return _make(out, (a, b), backward_fn)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g * c)

    return _make(a.values * c, (a,), backward_fn)


def relu(a) -> Tensor:
    a = as_tensor(a)
    keep = a.values > 0.0

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g * keep)

    return _make(np.where(keep, a.values, 0.0), (a,), backward_fn)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ValueError(
            f"matmul expects 2-d operands, got shapes {a.values.shape} and {b.values.shape}"
        )
    av = a.values.T if transpose_a else a.values
    bv = b.values.T if transpose_b else b.values
    if av.shape[1] != bv.shape[0]:
        raise ValueError(
            f"matmul shape mismatch: {a.values.shape}"
            f"{'^T' if transpose_a else ''} @ {b.values.shape}{'^T' if transpose_b else ''}"
        )
    out = av @ bv

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            da = g @ bv.T
            a.accumulate_grad(da.T if transpose_a else da)
        if b.requires_grad:
            db = av.T @ g
            b.accumulate_grad(db.T if transpose_b else db)

    return _make(out, (a, b), backward_fn)


# ---------------------------------------------------------------------------
# normalisations


def softmax(a, axis: int = -1, valid_mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``valid_mask`` is False get
    probability exactly 0 and receive exactly zero gradient.

    Every slice along ``axis`` must contain at least one valid entry.
    """
    a = as_tensor(a)
    v = a.values
    if valid_mask is None:
        m = v.max(axis=axis, keepdims=True)
        e = np.exp(v - m)
    else:
        mask = np.broadcast_to(np.asarray(valid_mask, dtype=bool), v.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("softmax: some slice has no valid entries")
        m = np.where(mask, v, -np.inf).max(axis=axis, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, v - m, 0.0)), 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    p = e / denom

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            inner = (g * p).sum(axis=axis, keepdims=True)
            a.accumulate_grad(p * (g - inner))

    return _make(p, (a,), backward_fn)


def layer_norm(a, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """Normalise each slice along ``axis`` to zero mean / unit variance."""
    a = as_tensor(a)
    v = a.values
    mu = v.mean(axis=axis, keepdims=True)
    var = v.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (v - mu) * inv

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            gm = g.mean(axis=axis, keepdims=True)
            gym = (g * y).mean(axis=axis, keepdims=True)
            a.accumulate_grad(inv * (g - gm - y * gym))

    return _make(y, (a,), backward_fn)


# ---------------------------------------------------------------------------
# structure ops


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.values.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(sl)])

    return _make(out, tuple(tensors), backward_fn)


def mean(a, axis: int, keepdims: bool = True) -> Tensor:
    a = as_tensor(a)
    out = a.values.mean(axis=axis, keepdims=keepdims)
    n = a.values.shape[axis]

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            gg = g if keepdims else np.expand_dims(g, axis)
            a.accumulate_grad(np.broadcast_to(gg, a.values.shape) / n)

    return _make(out, (a,), backward_fn)


def max_reduce(a, axis: int, keepdims: bool = True) -> Tensor:
    """Max along ``axis``; the gradient flows to the first argmax entry."""
    a = as_tensor(a)
    out = a.values.max(axis=axis, keepdims=keepdims)
    arg = a.values.argmax(axis=axis)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            gg = g if keepdims else np.expand_dims(g, axis)
            full = np.zeros_like(a.values)
            np.put_along_axis(full, np.expand_dims(arg, axis), gg, axis)
            a.accumulate_grad(full)

    return _make(out, (a,), backward_fn)


def sum_all(a) -> Tensor:
    """Sum every entry into a 1x1 scalar tensor."""
    a = as_tensor(a)
    out = np.array([[a.values.sum()]])

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.values, float(g.reshape(-1)[0])))

    return _make(out, (a,), backward_fn)


def embedding_lookup(table, indices) -> Tensor:
    """Gather rows of a 2-d tensor; backward scatter-adds into the table."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError(f"embedding_lookup expects 1-d indices, got shape {idx.shape}")
    if table.values.ndim != 2:
        raise ValueError(f"embedding_lookup expects a 2-d table, got shape {table.values.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.values.shape[0]):
        raise IndexError(
            f"lookup index out of range: max {int(idx.max())} for table of "
            f"{table.values.shape[0]} rows"
        )
    out = table.values[idx]

    def backward_fn(g: np.ndarray) -> None:
        if table.requires_grad:
            acc = np.zeros_like(table.values)
            np.add.at(acc, idx, g)
            table.accumulate_grad(acc)

    return _make(out, (table,), backward_fn)


def scatter_sum(a, index, num_rows: int) -> Tensor:
    """Sum rows of ``a`` into ``num_rows`` buckets selected by ``index``."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if a.values.ndim != 2 or idx.ndim != 1 or idx.shape[0] != a.values.shape[0]:
        raise ValueError(
            f"scatter_sum shape mismatch: values {a.values.shape}, index {idx.shape}"
        )
    out = np.zeros((num_rows, a.values.shape[1]))
    np.add.at(out, idx, a.values)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g[idx])

    return _make(out, (a,), backward_fn)


def tile_rows(a, n: int) -> Tensor:
    """Repeat a 1-row tensor ``n`` times; backward sums the rows back."""
    a = as_tensor(a)
    if a.values.ndim != 2 or a.values.shape[0] != 1:
        raise ValueError(f"tile_rows expects a 1xd tensor, got shape {a.values.shape}")
    out = np.repeat(a.values, n, axis=0)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g.sum(axis=0, keepdims=True))

    return _make(out, (a,), backward_fn)


def scaled_dot_attention(q, k, v, valid_mask: np.ndarray | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d)) v with an optional boolean key mask.

    ``valid_mask`` may be (n_keys,) shared by all queries or
    (n_queries, n_keys).  Rows of the returned weights sum to 1 over the
    valid keys.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.values.shape[-1]
    logits = scale(matmul(q, k, transpose_b=True), 1.0 / np.sqrt(float(d)))
    weights = softmax(logits, axis=-1, valid_mask=valid_mask)
    return matmul(weights, v)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss through the recorded graph."""
    if loss.values.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.values.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.values)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# parameters, optimiser, checkpoints


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape)


class ParameterStore:
    """Named parameter tensors plus Adam state.

    Names are unique and kept in insertion order, which makes every walk
    over the store deterministic.  ``save``/``load`` round-trip values and
    optimiser state bit for bit.
    """

    MAGIC = b"MBTENSR1"
    VERSION = 1

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self.opt_m: dict[str, np.ndarray] = {}
        self.opt_v: dict[str, np.ndarray] = {}
        self.step_count: int = 0

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.array(values, dtype=np.float64, copy=True), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params.keys())

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def clone(self) -> "ParameterStore":
        other = ParameterStore()
        for name, t in self._params.items():
            other.add(name, t.values)
        other.step_count = self.step_count
        other.opt_m = {k: v.copy() for k, v in self.opt_m.items()}
        other.opt_v = {k: v.copy() for k, v in self.opt_v.items()}
        return other

    def copy_values_from(self, other: "ParameterStore") -> None:
        """Overwrite all parameter values with ``other``'s (hard sync)."""
        if self.names() != other.names():
            raise ValueError("parameter stores have different names")
        for name, t in self._params.items():
            t.values = other._params[name].values.copy()

    # -- checkpoint format ---------------------------------------------------
    # magic(8) | version u32 | flags u32 (bit0: optimiser state present)
    # | n_params u32
    # then per parameter: name_len u16 | name utf-8 | ndim u8 | dims u32*
    #                     | values float64 little-endian
    # if optimiser state: step_count u64, then per parameter the m and v
    # arrays as raw float64 in the same order and shapes as the parameters.

    def save(self, path) -> None:
        has_opt = bool(self.opt_m) or self.step_count > 0
        with open(path, "wb") as fh:
            fh.write(self.MAGIC)
            fh.write(struct.pack("<II", self.VERSION, 1 if has_opt else 0))
            fh.write(struct.pack("<I", len(self._params)))
            for name, t in self._params.items():
                raw = name.encode("utf-8")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<B", t.values.ndim))
                fh.write(struct.pack(f"<{t.values.ndim}I", *t.values.shape))
                fh.write(np.ascontiguousarray(t.values, dtype="<f8").tobytes())
            if has_opt:
                fh.write(struct.pack("<Q", self.step_count))
                for name, t in self._params.items():
                    m = self.opt_m.get(name, np.zeros_like(t.values))
                    v = self.opt_v.get(name, np.zeros_like(t.values))
                    fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes())
                    fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ParameterStore":
        store = cls()
        with open(path, "rb") as fh:
            magic = fh.read(8)
            if magic != cls.MAGIC:
                raise ValueError(f"not a parameter checkpoint: bad magic {magic!r}")
            version, flags = struct.unpack("<II", fh.read(8))
            if version != cls.VERSION:
                raise ValueError(f"unsupported checkpoint version {version}")
            (n_params,) = struct.unpack("<I", fh.read(4))
            shapes: list[tuple[str, tuple]] = []
            for _ in range(n_params):
                (name_len,) = struct.unpack("<H", fh.read(2))
                name = fh.read(name_len).decode("utf-8")
                (ndim,) = struct.unpack("<B", fh.read(1))
                dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
                count = int(np.prod(dims)) if dims else 1
                vals = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(dims)
                store.add(name, vals)
                shapes.append((name, dims))
            if flags & 1:
                (store.step_count,) = struct.unpack("<Q", fh.read(8))
                for name, dims in shapes:
                    count = int(np.prod(dims)) if dims else 1
                    m = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(dims)
                    v = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(dims)
                    store.opt_m[name] = m.copy()
                    store.opt_v[name] = v.copy()
        return store


def adam_step(
    store: ParameterStore,
    lr: float = 1e-3,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One Adam update over every parameter, using accumulated gradients.

    Parameters with no gradient (never touched by backward) are treated as
    having zero gradient, which leaves them unchanged on a fresh optimiser.
    """
    b1, b2 = betas
    store.step_count += 1
    t = store.step_count
    for name, p in store.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.values)
        m = store.opt_m.get(name)
        v = store.opt_v.get(name)
        if m is None:
            m = np.zeros_like(p.values)
            v = np.zeros_like(p.values)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        store.opt_m[name] = m
        store.opt_v[name] = v
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.values = p.values - lr * m_hat / (np.sqrt(v_hat) + eps)
