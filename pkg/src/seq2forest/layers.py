"""Neural building blocks on top of the autodiff tape.

All trainable arrays live in a ParamStore keyed by hierarchical names
("encoder/blocks/0/attn/Wq"), which gives deterministic seeded
initialization, uniform gradient handling, and a flat state dict for
checkpoints.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ShapeError(Exception):
    """A stored tensor does not match the model parameter it should fill."""


class ParamStore:
    """Named trainable tensors with seeded initialization."""

    def __init__(self, rng: np.random.Generator, dtype=np.float32):
        self.rng = rng
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}

    def create(self, name: str, shape: tuple[int, ...], init: str | float) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if init == "glorot":
            fan_in = shape[0] if len(shape) > 1 else shape[0]
            fan_out = shape[-1]
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            data = self.rng.uniform(-limit, limit, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "normal":
            data = self.rng.normal(0.0, 0.02, size=shape)
        elif isinstance(init, float):
            data = np.full(shape, init)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(np.asarray(data, dtype=self.dtype), requires_grad=True)
        self.params[name] = t
        return t

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = [n for n in self.params if n not in state]
        if missing:
            raise ShapeError(f"checkpoint is missing tensor {missing[0]!r}")
        extra = [n for n in state if n not in self.params]
        if extra:
            raise ShapeError(f"checkpoint has unexpected tensor {extra[0]!r}")
        for name, t in self.params.items():
            arr = np.asarray(state[name])
            if tuple(arr.shape) != tuple(t.data.shape):
                raise ShapeError(
                    f"tensor {name!r}: checkpoint shape {tuple(arr.shape)} "
                    f"does not match model shape {tuple(t.data.shape)}"
                )
            t.data = arr.astype(self.dtype)

    def global_grad_norm(self) -> float:
        total = 0.0
        for t in self.params.values():
            if t.grad is not None:
                total += float(np.sum(t.grad.astype(np.float64) ** 2))
        return math.sqrt(total)


_ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "tanh": ad.tanh,
    "relu": ad.relu,
    "linear": lambda t: t,
}


def _affine(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    if x.ndim == 1:
        out = ad.einsum2("d,dk->k", x, w)
    else:
        out = ad.matmul(x, w)
    return out if b is None else out + b


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int, bias: bool = True):
        self.w = store.create(f"{name}/W", (d_in, d_out), "glorot")
        self.b = store.create(f"{name}/b", (d_out,), "zeros") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return _affine(x, self.w, self.b)


class MLP:
    """One hidden layer: act(x W1 + b1) W2 + b2."""

    def __init__(
        self,
        store: ParamStore,
        name: str,
        d_in: int,
        d_hidden: int,
        d_out: int,
        activation: str = "tanh",
    ):
        self.hidden = Linear(store, f"{name}/hidden", d_in, d_hidden)
        self.out = Linear(store, f"{name}/out", d_hidden, d_out)
        self.act = _ACTIVATIONS[activation]

    def __call__(self, x: Tensor) -> Tensor:
        return self.out(self.act(self.hidden(x)))


class Embedding:
    def __init__(self, store: ParamStore, name: str, count: int, dim: int):
        self.table = store.create(f"{name}/table", (count, dim), "normal")

    def __call__(self, indices) -> Tensor:
        return ad.take(self.table, np.asarray(indices))


class LSTMCell:
    """Standard LSTM cell; forget-gate bias starts at 1 for stable training."""

    def __init__(self, store: ParamStore, name: str, d_in: int, hidden: int):
        self.hidden_size = hidden
        self.dtype = store.dtype
        self.w = store.create(f"{name}/W", (d_in, 4 * hidden), "glorot")
        self.u = store.create(f"{name}/U", (hidden, 4 * hidden), "glorot")
        self.b = store.create(f"{name}/b", (4 * hidden,), "zeros")
        self.b.data[hidden : 2 * hidden] = 1.0

    def zero_state(self) -> tuple[Tensor, Tensor]:
        zero = np.zeros(self.hidden_size, dtype=self.dtype)
        return Tensor(zero.copy()), Tensor(zero.copy())

    def __call__(
        self, x: Tensor, state: tuple[Tensor, Tensor]
    ) -> tuple[Tensor, Tensor]:
        h_prev, c_prev = state
        n = self.hidden_size
        gates = (
            ad.einsum2("d,dk->k", x, self.w)
            + ad.einsum2("h,hk->k", h_prev, self.u)
            + self.b
        )
        i_gate = ad.sigmoid(gates[0:n])
        f_gate = ad.sigmoid(gates[n : 2 * n])
        g_cand = ad.tanh(gates[2 * n : 3 * n])
        o_gate = ad.sigmoid(gates[3 * n : 4 * n])
        c_new = f_gate * c_prev + i_gate * g_cand
        h_new = o_gate * ad.tanh(c_new)
        return h_new, c_new

    def run(self, rows: Tensor) -> Tensor:
        """Feed each row in order from a zero state; return the final hidden."""
        state = self.zero_state()
        for t in range(rows.shape[0]):
            state = self(rows[t], state)
        return state[0]


class Conv1dSame:
    """1-D convolution over the second-to-last axis, length preserving.

    Accepts (n, c_in) or (batch, n, c_in).  Even kernels pad one extra
    step on the right.
    """

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, kernel: int):
        if kernel < 1:
            raise ValueError("kernel must be >= 1")
        self.kernel = kernel
        self.w = store.create(f"{name}/W", (kernel, c_in, c_out), "glorot")
        self.b = store.create(f"{name}/b", (c_out,), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        left = (self.kernel - 1) // 2
        right = self.kernel - 1 - left
        width = [(0, 0)] * x.ndim
        width[-2] = (left, right)
        padded = ad.pad(x, width)
        n = x.shape[-2]
        out: Tensor | None = None
        for offset in range(self.kernel):
            sl = [slice(None)] * x.ndim
            sl[-2] = slice(offset, offset + n)
            window = padded[tuple(sl)]
            term = ad.matmul(window, self.w[offset])
            out = term if out is None else out + term
        assert out is not None
        return out + self.b


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int, eps: float = 1e-5):
        self.dim = dim
        self.eps = eps
        self.gamma = store.create(f"{name}/gamma", (dim,), "ones")
        self.beta = store.create(f"{name}/beta", (dim,), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        mean = x.sum(axis=-1, keepdims=True) * (1.0 / self.dim)
        centered = x - mean
        var = (centered * centered).sum(axis=-1, keepdims=True) * (1.0 / self.dim)
        inv = (var + self.eps) ** -0.5
        return centered * inv * self.gamma + self.beta


class MultiHeadSelfAttention:
    def __init__(self, store: ParamStore, name: str, hidden: int, heads: int):
        if hidden % heads != 0:
            raise ValueError(f"hidden dim {hidden} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = hidden // heads
        self.hidden = hidden
        self.wq = Linear(store, f"{name}/Wq", hidden, hidden)
        self.wk = Linear(store, f"{name}/Wk", hidden, hidden)
        self.wv = Linear(store, f"{name}/Wv", hidden, hidden)
        self.wo = Linear(store, f"{name}/Wo", hidden, hidden)

    def _split(self, x: Tensor, n: int) -> Tensor:
        return ad.swapaxes(x.reshape(n, self.heads, self.head_dim), 0, 1)

    def __call__(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        q = self._split(self.wq(x), n)
        k = self._split(self.wk(x), n)
        v = self._split(self.wv(x), n)
        scores = ad.matmul(q, ad.swapaxes(k, 1, 2)) * (1.0 / math.sqrt(self.head_dim))
        weights = ad.softmax(scores, axis=-1)
        context = ad.matmul(weights, v)
        merged = ad.swapaxes(context, 0, 1).reshape(n, self.hidden)
        return self.wo(merged)


class TransformerBlock:
    """Pre-norm self-attention block with a ReLU feed-forward."""

    def __init__(self, store: ParamStore, name: str, hidden: int, heads: int, ffn_dim: int):
        self.ln1 = LayerNorm(store, f"{name}/ln1", hidden)
        self.attn = MultiHeadSelfAttention(store, f"{name}/attn", hidden, heads)
        self.ln2 = LayerNorm(store, f"{name}/ln2", hidden)
        self.ffn_in = Linear(store, f"{name}/ffn_in", hidden, ffn_dim)
        self.ffn_out = Linear(store, f"{name}/ffn_out", ffn_dim, hidden)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.ffn_out(ad.relu(self.ffn_in(self.ln2(x))))
