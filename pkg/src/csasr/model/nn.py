"""Minimal module system and the layers shared by encoder and decoders."""

from __future__ import annotations

import math
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from ..autodiff import ops
from ..autodiff.tensor import Tensor


class DropoutSource:
    """Shared train/eval switch and RNG for every dropout site of a model."""

    def __init__(self, seed: int = 0):
        self.training = True
        self.rng = np.random.default_rng(seed)


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = np.zeros_like(p.data)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        bound = math.sqrt(6.0 / (d_in + d_out))
        self.weight = _param(rng.uniform(-bound, bound, size=(d_in, d_out)))
        self.bias = _param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        return ops.add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = _param(np.ones(d))
        self.beta = _param(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator):
        self.weight = _param(rng.standard_normal((n, d)))

    def __call__(self, ids) -> Tensor:
        return ops.embedding(self.weight, ids)


class Dropout(Module):
    def __init__(self, p: float, source: DropoutSource):
        self.p = p
        self.source = source

    def __call__(self, x: Tensor) -> Tensor:
        return ops.dropout(x, self.p, rng=self.source.rng, training=self.source.training)


class FeedForward(Module):
    def __init__(self, d: int, d_ff: int, activation: str, dropout: Dropout, rng: np.random.Generator):
        self.w1 = Linear(d, d_ff, rng)
        self.w2 = Linear(d_ff, d, rng)
        self.activation = activation
        self.dropout = dropout

    def __call__(self, x: Tensor) -> Tensor:
        h = self.w1(x)
        h = ops.swish(h) if self.activation == "swish" else ops.relu(h)
        return self.w2(self.dropout(h))


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, dropout: Dropout, rng: np.random.Generator):
        if d % heads:
            raise ValueError(f"model width {d} not divisible by {heads} heads")
        self.heads = heads
        self.d_k = d // heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.out = Linear(d, d, rng)
        self.dropout = dropout

    def __call__(self, xq: Tensor, xkv: Tensor, mask: Optional[np.ndarray]) -> Tensor:
        """``mask`` is boolean, true where attention is blocked, broadcastable to
        (B, heads, Tq, Tk)."""
        bq, tq, d = xq.shape
        bk, tk, _ = xkv.shape
        h, dk = self.heads, self.d_k
        q = self.q(xq).reshape(bq, tq, h, dk).transpose(0, 2, 1, 3)
        k = self.k(xkv).reshape(bk, tk, h, dk).transpose(0, 2, 3, 1)
        v = self.v(xkv).reshape(bk, tk, h, dk).transpose(0, 2, 1, 3)
        scores = ops.mul(ops.matmul(q, k), 1.0 / math.sqrt(dk))
        if mask is not None:
            scores = ops.masked_fill(scores, mask)
        attn = self.dropout(ops.softmax(scores))
        ctx = ops.matmul(attn, v).transpose(0, 2, 1, 3).reshape(bq, tq, d)
        return self.out(ctx)


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div[: d // 2])
    return pe


def length_mask(lengths, max_len: int) -> np.ndarray:
    """Boolean (B, max_len), true on valid positions."""
    return np.arange(max_len)[None, :] < np.asarray(lengths)[:, None]


def causal_mask(n: int) -> np.ndarray:
    """Boolean (n, n), true where key position is in the future."""
    return np.triu(np.ones((n, n), dtype=bool), k=1)
