"""Parameter containers and layers built on the autodiff tensor."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .ops import dilated_causal_conv, gru_sequence, masked_attention
from .tensor import Tensor


def param(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return param(rng.uniform(-bound, bound, size=shape))


class Module:
    """Walks attributes to find parameters; order follows assignment order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            yield from _walk(value, prefix + name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _walk(value, name: str):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")
    elif isinstance(value, dict):
        for k in value:
            yield from _walk(value[k], f"{name}.{k}")


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = _uniform(rng, n_in, (n_in, n_out))
        self.bias = _uniform(rng, n_in, (n_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias


class MLP(Module):
    """One hidden layer with ReLU."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator):
        self.hidden = Linear(n_in, n_hidden, rng)
        self.out = Linear(n_hidden, n_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.out(T.relu(self.hidden(x)))


class CausalConv(Module):
    def __init__(self, c_in: int, c_out: int, kernel_size: int, rng: np.random.Generator, dilation: int = 1):
        fan_in = c_in * kernel_size
        self.kernel = _uniform(rng, fan_in, (kernel_size, c_in, c_out))
        self.bias = _uniform(rng, fan_in, (c_out,))
        self.dilation = dilation

    def __call__(self, x: Tensor) -> Tensor:
        return dilated_causal_conv(x, self.kernel, self.dilation, self.bias)


class GRU(Module):
    """Gated recurrent unit; ``encode`` unrolls a sequence, ``step`` runs one cell."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        self.hidden_size = hidden
        self.W = _uniform(rng, hidden, (n_in, 3 * hidden))
        self.U = _uniform(rng, hidden, (hidden, 3 * hidden))
        self.b = _uniform(rng, hidden, (3 * hidden,))
        self.bn = _uniform(rng, hidden, (hidden,))

    def encode(self, x: Tensor, h0: Tensor | None = None) -> Tensor:
        if h0 is None:
            h0 = Tensor(np.zeros((x.shape[0], self.hidden_size)))
        return gru_sequence(x, h0, self.W, self.U, self.b, self.bn)

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        H = self.hidden_size
        a = T.matmul(x, self.W) + self.b
        c = T.matmul(h, self.U)
        r = T.sigmoid(a[:, :H] + c[:, :H])
        z = T.sigmoid(a[:, H : 2 * H] + c[:, H : 2 * H])
        n = T.tanh(a[:, 2 * H :] + r * (c[:, 2 * H :] + self.bn))
        return (1.0 - z) * n + z * h


class MultiHeadAttention(Module):
    """Multi-head self-attention over ``(B, T, D)``; Q/K/V come from causal convs.

    With ``kernel_size=1`` the projections are plain position-wise linear maps.
    """

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, kernel_size: int = 1, dilation: int = 1):
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.q = CausalConv(d_model, d_model, kernel_size, rng, dilation)
        self.k = CausalConv(d_model, d_model, kernel_size, rng, dilation)
        self.v = CausalConv(d_model, d_model, kernel_size, rng, dilation)
        self.out = Linear(d_model, d_model, rng)

    def _heads(self, x: Tensor) -> Tensor:
        B, L, D = x.shape
        return x.reshape(B, L, self.n_heads, D // self.n_heads).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        B, L, D = x.shape
        s = masked_attention(self._heads(self.q(x)), self._heads(self.k(x)), self._heads(self.v(x)), mask)
        return self.out(s.transpose(0, 2, 1, 3).reshape(B, L, D))
