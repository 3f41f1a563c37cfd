"""Reverse-mode automatic differentiation over numpy float64 arrays.

A :class:`Tensor` wraps an ndarray and remembers, for each derived value,
which tensors produced it and how to push a gradient back to them
(vector-Jacobian products). Calling :func:`backward` on a scalar loss
walks the recorded graph in reverse topological order and accumulates
gradients on every tensor created with ``requires_grad=True``.

Conventions kept throughout:

* all arithmetic is float64; 32-bit storage only happens at the
  checkpoint boundary,
* ``-inf`` is a legal masking sentinel for the row-softmax family of
  ops; a row that is entirely masked softmaxes to all zeros,
* forward values of documented ops on finite inputs stay finite.

Graphs are single-use: build a loss, call :func:`backward`, step, and
drop the loss. Parameters are leaves and survive across steps. Forward
evaluation under :func:`no_grad` records nothing, which keeps inference
cheap and side-effect free (safe to run in parallel over read-only
parameters).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the ``with`` block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested operation."""


class Tensor:
    """An ndarray with an optional gradient and a backward recipe."""

    __slots__ = ("data", "grad", "requires_grad", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        # tuple of (parent Tensor, vjp: upstream grad -> grad contribution)
        self._parents: tuple = ()

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    # -- method forms used all over the model code ----------------------
    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def clip(self, lo: float, hi: float):
        return clip(self, lo, hi)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data: np.ndarray, parents: Sequence[tuple]) -> Tensor:
    """Create a result tensor, recording vjps only for live parents."""
    if _GRAD_ENABLED:
        live = tuple((p, fn) for p, fn in parents if p.requires_grad)
        if live:
            out = Tensor(data, requires_grad=True)
            out._parents = live
            return out
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if squeeze:
        grad = grad.sum(axis=squeeze, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# element-wise primitives


def _identity(g):
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    if a.data.shape == out.shape and b.data.shape == out.shape:
        return _node(out, [(a, _identity), (b, _identity)])
    return _node(out, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(g, b.data.shape)),
    ])


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    if a.data.shape == out.shape and b.data.shape == out.shape:
        return _node(out, [(a, _identity), (b, lambda g: -g)])
    return _node(out, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(-g, b.data.shape)),
    ])


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    if a.data.shape == out.shape and b.data.shape == out.shape:
        return _node(out, [
            (a, lambda g: g * b.data),
            (b, lambda g: g * a.data),
        ])
    return _node(out, [
        (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
    ])


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(out, [
        (a, lambda g: _unbroadcast(g / b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
    ])


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, [(a, lambda g: -g)])


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, [(a, lambda g: g * out)])


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), [(a, lambda g: g / a.data)])


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    # derivative at exactly zero is undefined; define it as 0 so padding
    # vectors never poison a backward pass with inf
    return _node(out, [(a, lambda g: g * np.where(out > 0.0, 0.5 / np.where(out > 0.0, out, 1.0), 0.0))])


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, [(a, lambda g: g * (1.0 - out * out))])


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _node(out, [(a, lambda g: g * out * (1.0 - out))])


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _node(out, [(a, lambda g: g * (a.data > 0.0))])


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)
    return _node(out, [(a, lambda g: g * inside)])


# ---------------------------------------------------------------------------
# shape / structure primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner extents disagree: {a.data.shape} vs {b.data.shape}")
    out = a.data @ b.data
    return _node(out, [
        (a, lambda g: g @ b.data.T),
        (b, lambda g: a.data.T @ g),
    ])


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-d tensor, got shape {a.data.shape}")
    return _node(a.data.T, [(a, lambda g: g.T)])


def reshape(a, *shape) -> Tensor:
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.data.shape
    return _node(a.data.reshape(shape), [(a, lambda g: g.reshape(old))])


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i: int) -> Callable:
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return vjp

    return _node(out, [(p, make_vjp(i)) for i, p in enumerate(parts)])


def gather_rows(table, indices) -> Tensor:
    """Row lookup ``table[indices]`` (embedding gather); duplicates accumulate."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows expects 1-d indices, got shape {idx.shape}")
    out = table.data[idx]

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return full

    return _node(out, [(table, vjp)])


def slice_cols(a, start: int, size: int) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"slice_cols expects a 2-d tensor, got shape {a.data.shape}")
    out = a.data[:, start:start + size]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[:, start:start + size] = g
        return full

    return _node(out, [(a, vjp)])


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    return _node(out, [(a, vjp)])


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.data.shape
    count = a.data.size if axis is None else shape[axis]

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g / count, shape)

    return _node(out, [(a, vjp)])


# ---------------------------------------------------------------------------
# row-wise softmax family (with -inf masking support)


def _softmax_rows_raw(m: np.ndarray) -> np.ndarray:
    out = np.zeros_like(m)
    row_max = np.max(m, axis=1, keepdims=True)
    live = np.isfinite(row_max)[:, 0]
    if live.any():
        z = m[live] - row_max[live]
        e = np.exp(z)
        out[live] = e / e.sum(axis=1, keepdims=True)
    return out


def softmax_rows(a) -> Tensor:
    """Row softmax with max-subtraction; all ``-inf`` rows map to zeros."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-d tensor, got shape {a.data.shape}")
    out = _softmax_rows_raw(a.data)

    def vjp(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return out * (g - inner)

    return _node(out, [(a, vjp)])


def logsumexp_rows(a) -> Tensor:
    """Per-row log-sum-exp, shape [m,1]; rows need one finite entry."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"logsumexp_rows expects a 2-d tensor, got shape {a.data.shape}")
    row_max = np.max(a.data, axis=1, keepdims=True)
    live = np.isfinite(row_max)[:, 0]
    out = np.full((a.data.shape[0], 1), -np.inf)
    if live.any():
        z = a.data[live] - row_max[live]
        out[live] = row_max[live] + np.log(np.exp(z).sum(axis=1, keepdims=True))
    soft = _softmax_rows_raw(a.data)

    def vjp(g):
        return g * soft

    return _node(out, [(a, vjp)])


# ---------------------------------------------------------------------------
# similarity helpers (compositions; gradients come for free)

COSINE_EPS = 1e-12


def cosine_sim(a, b) -> Tensor:
    """Cosine similarity a.b / (|a||b| + eps); 0 when both vectors vanish."""
    a, b = as_tensor(a), as_tensor(b)
    dot = (a * b).sum()
    na = (a * a).sum().sqrt()
    nb = (b * b).sum().sqrt()
    return dot / (na * nb + COSINE_EPS)


def cosine_rows(a, b) -> Tensor:
    """Pairwise cosine matrix between rows of ``a`` [m,d] and ``b`` [n,d]."""
    a, b = as_tensor(a), as_tensor(b)
    dots = a @ b.T
    na = (a * a).sum(axis=1, keepdims=True).sqrt()
    nb = (b * b).sum(axis=1, keepdims=True).sqrt()
    return dots / (na @ nb.T + COSINE_EPS)


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar ``loss`` into the graph's leaves."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")

    # iterative topological sort; graphs can be thousands of nodes deep
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in node._parents:
            contribution = vjp(g)
            if parent.grad is None:
                parent.grad = np.array(contribution, dtype=np.float64)
            else:
                parent.grad = parent.grad + contribution
