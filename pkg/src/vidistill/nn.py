"""Small transformer building blocks on top of :mod:`vidistill.tensor`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

NEG_INF = -1e9


class Module:
    """Parameter container; tensors with ``requires_grad`` and submodules are discovered by attribute."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for n, p in own.items():
            arr = np.asarray(state[n], dtype=T.DTYPE)
            if arr.shape != p.shape:
                raise ValueError(f"{n}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()


class Parameter(Tensor):
    __slots__ = ()


def param(data) -> Parameter:
    return Parameter(data, requires_grad=True)


def normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True, std: float | None = None):
        std = 1.0 / math.sqrt(d_in) if std is None else std
        self.weight = param(normal(rng, (d_in, d_out), std))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class FeedForward(Module):
    def __init__(self, rng, dim: int, hidden: int):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim, std=1.0 / math.sqrt(hidden) / 2)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Scaled dot-product attention composed from matmul/scale/add/softmax."""

    def __init__(self, rng, dim: int, heads: int):
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(rng, dim, dim)
        # no key bias: softmax over keys is shift-invariant, so its gradient is identically zero
        self.k = Linear(rng, dim, dim, bias=False)
        self.v = Linear(rng, dim, dim)
        self.o = Linear(rng, dim, dim, std=1.0 / math.sqrt(dim) / 2)

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, context: Tensor | None = None, mask: np.ndarray | None = None) -> Tensor:
        """``mask`` is additive, broadcastable to ``(B, heads, Lq, Lk)``."""
        context = x if context is None else context
        b, n, d = x.shape
        q = self._split(self.q(x))
        k = self._split(self.k(context))
        v = self._split(self.v(context))
        scores = T.scale(q @ T.swap_last(k), 1.0 / math.sqrt(d // self.heads))
        if mask is not None:
            scores = scores + Tensor(mask)
        attn = T.softmax(scores, axis=-1)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.o(out)


class EncoderBlock(Module):
    """Pre-LN self-attention block."""

    def __init__(self, rng, dim: int, heads: int, hidden: int):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(rng, dim, heads)
        self.ln2 = LayerNorm(dim)
        self.ff = FeedForward(rng, dim, hidden)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.ln1(x), mask=mask)
        return x + self.ff(self.ln2(x))


class DecoderBlock(Module):
    """Pre-LN causal self-attention, cross-attention, feed-forward."""

    def __init__(self, rng, dim: int, heads: int, hidden: int):
        self.ln1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(rng, dim, heads)
        self.ln2 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(rng, dim, heads)
        self.ln3 = LayerNorm(dim)
        self.ff = FeedForward(rng, dim, hidden)

    def __call__(self, x: Tensor, memory: Tensor, self_mask: np.ndarray, memory_mask: np.ndarray | None) -> Tensor:
        x = x + self.self_attn(self.ln1(x), mask=self_mask)
        x = x + self.cross_attn(self.ln2(x), context=memory, mask=memory_mask)
        return x + self.ff(self.ln3(x))


def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), NEG_INF), k=1)[None, None]


def key_padding_mask(valid: np.ndarray) -> np.ndarray:
    """``valid`` is ``(B, L)`` boolean; returns additive mask ``(B, 1, 1, L)``."""
    return np.where(valid, 0.0, NEG_INF)[:, None, None, :]


def sinusoid_table(n: int, dim: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(dim // 2)[None, :]
    ang = pos / (10000.0 ** (2 * i / dim))
    table = np.zeros((n, dim))
    table[:, 0::2] = np.sin(ang)
    table[:, 1::2] = np.cos(ang)
    return table


def patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    """``(..., 3, H, W)`` -> ``(..., (H/p)*(W/p), 3*p*p)`` row-major over patches."""
    *lead, c, h, w = frames.shape
    gh, gw = h // patch, w // patch
    x = frames.reshape(*lead, c, gh, patch, gw, patch)
    nd = len(lead)
    axes = tuple(range(nd)) + (nd + 1, nd + 3, nd, nd + 2, nd + 4)
    return x.transpose(axes).reshape(*lead, gh * gw, c * patch * patch)
