"""Minimal reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray and, while gradients are enabled, records the
operation that produced it.  ``backward`` walks the tape in reverse
topological order and accumulates gradients into every tensor marked
``requires_grad`` (parameters, or anything downstream of one).  Graph
recording is skipped entirely when no operand requires gradients, so
inference code runs the same functions with near-zero overhead inside
``no_grad()``.

Only the operations the models need are provided; all of them are
exercised by finite-difference checks in the test suite.
"""

from __future__ import annotations

import numbers
from typing import Callable, Sequence

import numpy as np

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to the given shape (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, numbers.Number):
        def bw(g, a=a):
            _accumulate(a, g)

        return _make(a.data + b, (a,), bw)

    def bw(g, a=a, b=b):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g, a=a):
        _accumulate(a, -g)

    return _make(-a.data, (a,), bw)


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, numbers.Number):
        def bw(g, a=a, b=b):
            _accumulate(a, g * b)

        return _make(a.data * b, (a,), bw)

    def bw(g, a=a, b=b):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), bw)


def power(a: Tensor, exponent: float) -> Tensor:
    out_data = a.data**exponent

    def bw(g, a=a, exponent=exponent):
        _accumulate(a, g * exponent * a.data ** (exponent - 1))

    return _make(out_data, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul requires >=2-D operands; use einsum2 for vectors")

    def bw(g, a=a, b=b):
        _accumulate(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        _accumulate(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    return _make(a.data @ b.data, (a, b), bw)


def einsum2(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum whose gradients are einsums with swapped roles.

    Each operand's index set must be covered by the output's plus the
    other operand's (true for every contraction the models use).
    """
    lhs, out_sub = spec.replace(" ", "").split("->")
    a_sub, b_sub = lhs.split(",")
    if not (set(a_sub) <= set(out_sub) | set(b_sub)):
        raise ValueError(f"unsupported einsum spec {spec!r}")
    if not (set(b_sub) <= set(out_sub) | set(a_sub)):
        raise ValueError(f"unsupported einsum spec {spec!r}")

    def bw(g, a=a, b=b, a_sub=a_sub, b_sub=b_sub, out_sub=out_sub):
        _accumulate(a, np.einsum(f"{out_sub},{b_sub}->{a_sub}", g, b.data))
        _accumulate(b, np.einsum(f"{out_sub},{a_sub}->{b_sub}", g, a.data))

    return _make(np.einsum(spec, a.data, b.data), (a, b), bw)


# ---------------------------------------------------------------------------
# nonlinearities


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bw(g, a=a, out_data=out_data):
        _accumulate(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out_data = _sigmoid(a.data)

    def bw(g, a=a, out_data=out_data):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bw)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def bw(g, a=a):
        _accumulate(a, g * (a.data > 0))

    return _make(out_data, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bw(g, a=a, out_data=out_data):
        _accumulate(a, g * out_data)

    return _make(out_data, (a,), bw)


def log(a: Tensor) -> Tensor:
    def bw(g, a=a):
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    ex = np.exp(shifted)
    out_data = ex / np.sum(ex, axis=axis, keepdims=True)

    def bw(g, a=a, out_data=out_data, axis=axis):
        inner = np.sum(g * out_data, axis=axis, keepdims=True)
        _accumulate(a, (g - inner) * out_data)

    return _make(out_data, (a,), bw)


# ---------------------------------------------------------------------------
# shape and indexing


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g, a=a, axis=axis, keepdims=keepdims):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(out_data, (a,), bw)


def amax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; ties route gradient to the first maximum."""
    idx = np.argmax(a.data, axis=axis)
    out_data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out_data = np.squeeze(out_data, axis=axis)

    def bw(g, a=a, idx=idx, axis=axis, keepdims=keepdims):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), g, axis=axis)
        _accumulate(a, full)

    return _make(out_data, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g, a=a):
        _accumulate(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), bw)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    def bw(g, a=a, ax1=ax1, ax2=ax2):
        _accumulate(a, g.swapaxes(ax1, ax2))

    return _make(a.data.swapaxes(ax1, ax2), (a,), bw)


def take(a: Tensor, idx) -> Tensor:
    """Indexing/gather; supports basic slices and integer-array indices."""
    out_data = a.data[idx]

    def bw(g, a=a, idx=idx):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accumulate(a, full)

    return _make(out_data, (a,), bw)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(parts)
    sizes = [p.data.shape[axis] for p in parts]

    def bw(g, parts=parts, sizes=sizes, axis=axis):
        offset = 0
        for p, size in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + size)
            _accumulate(p, g[tuple(sl)])
            offset += size

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, bw)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(parts)

    def bw(g, parts=parts, axis=axis):
        for i, p in enumerate(parts):
            _accumulate(p, np.take(g, i, axis=axis))

    return _make(np.stack([p.data for p in parts], axis=axis), parts, bw)


def pad(a: Tensor, pad_width) -> Tensor:
    """Zero padding; pad_width as for np.pad."""
    pad_width = tuple((int(lo), int(hi)) for lo, hi in pad_width)

    def bw(g, a=a, pad_width=pad_width):
        sl = tuple(
            slice(lo, g.shape[i] - hi) for i, (lo, hi) in enumerate(pad_width)
        )
        _accumulate(a, g[sl])

    return _make(np.pad(a.data, pad_width), (a,), bw)


# ---------------------------------------------------------------------------
# losses


def bce_with_logits_sum(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Numerically stable binary cross entropy, summed over masked cells.

    Computed from logits directly (never from clamped probabilities),
    with gradient sigmoid(logit) - target on included cells.  An
    all-false mask yields exactly 0.
    """
    x = logits.data
    y = np.asarray(targets, dtype=x.dtype)
    m = np.asarray(mask, dtype=x.dtype)
    cell = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    out_data = np.asarray((cell * m).sum(), dtype=x.dtype)

    def bw(g, logits=logits, y=y, m=m):
        _accumulate(logits, g * (_sigmoid(logits.data) - y) * m)

    return _make(out_data, (logits,), bw)


# ---------------------------------------------------------------------------
# backward pass


def backward(root: Tensor) -> None:
    """Accumulate gradients of a scalar root into all requires_grad tensors."""
    if root.data.size != 1:
        raise ValueError("backward requires a scalar root")
    if not root.requires_grad:
        return
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
