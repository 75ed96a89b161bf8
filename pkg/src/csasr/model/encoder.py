"""Convolutional subsampling and conformer encoder."""

from __future__ import annotations

import math
from typing import List, Tuple

import numpy as np

from ..autodiff import ops
from ..autodiff.tensor import ShapeError, Tensor
from .nn import (
    Dropout,
    DropoutSource,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    length_mask,
    sinusoidal_positions,
)


def _half(n):
    return -(-np.asarray(n) // 2)


class Conv2dSubsampling(Module):
    """Stacked 3x3 stride-2 convolutions (padding 1), then a linear map to D."""

    def __init__(self, feature_dim: int, d: int, factor: int, rng: np.random.Generator):
        self.stages = int(round(math.log2(factor)))
        c_in = 1
        for i in range(self.stages):
            fan_in = c_in * 9
            bound = math.sqrt(6.0 / (fan_in + d * 9))
            setattr(self, f"conv{i}_w", Tensor(rng.uniform(-bound, bound, (d, c_in, 3, 3)), requires_grad=True))
            setattr(self, f"conv{i}_b", Tensor(np.zeros(d), requires_grad=True))
            c_in = d
        f_out = feature_dim
        for _ in range(self.stages):
            f_out = int(_half(f_out))
        self.out = Linear(d * f_out, d, rng)
        self.d = d

    def output_lengths(self, lengths) -> np.ndarray:
        out = np.asarray(lengths)
        for _ in range(self.stages):
            out = _half(out)
        return out

    def __call__(self, x: Tensor, lengths) -> Tuple[Tensor, np.ndarray]:
        b, t, f = x.shape
        lens = np.asarray(lengths)
        # zero the padding so boundary windows see the same input as unpadded
        x = ops.mul(x, length_mask(lens, t).astype(np.float64)[:, :, None])
        h = x.reshape(b, 1, t, f)
        for i in range(self.stages):
            h = ops.relu(
                ops.conv2d(h, getattr(self, f"conv{i}_w"), getattr(self, f"conv{i}_b"), stride=2, padding=1)
            )
            lens = _half(lens)
            tmask = length_mask(lens, h.shape[2]).astype(np.float64)[:, None, :, None]
            h = ops.mul(h, tmask)
        b, d, t1, f1 = h.shape
        h = h.transpose(0, 2, 1, 3).reshape(b, t1, d * f1)
        return self.out(h), lens


class ConvModule(Module):
    def __init__(self, d: int, kernel: int, dropout: Dropout, rng: np.random.Generator):
        self.pw1 = Linear(d, 2 * d, rng)
        bound = math.sqrt(3.0 / kernel)
        self.dw_weight = Tensor(rng.uniform(-bound, bound, (kernel, d)), requires_grad=True)
        self.dw_bias = Tensor(np.zeros(d), requires_grad=True)
        self.norm = LayerNorm(d)
        self.pw2 = Linear(d, d, rng)
        self.dropout = dropout

    def __call__(self, x: Tensor, frame_mask: np.ndarray) -> Tensor:
        h = ops.glu(self.pw1(x))
        h = ops.mul(h, frame_mask)
        h = ops.depthwise_conv1d(h, self.dw_weight, self.dw_bias)
        h = ops.swish(self.norm(h))
        return self.dropout(self.pw2(h))


class ConformerLayer(Module):
    """Half-step FFN, self-attention, convolution module, half-step FFN, norm."""

    def __init__(self, d: int, heads: int, d_ff: int, kernel: int, source: DropoutSource, p: float, rng):
        drop = Dropout(p, source)
        self.dropout = drop
        self.ff1_norm = LayerNorm(d)
        self.ff1 = FeedForward(d, d_ff, "swish", drop, rng)
        self.att_norm = LayerNorm(d)
        self.att = MultiHeadAttention(d, heads, drop, rng)
        self.conv_norm = LayerNorm(d)
        self.conv = ConvModule(d, kernel, drop, rng)
        self.ff2_norm = LayerNorm(d)
        self.ff2 = FeedForward(d, d_ff, "swish", drop, rng)
        self.final_norm = LayerNorm(d)

    def __call__(self, x: Tensor, key_mask: np.ndarray, frame_mask: np.ndarray) -> Tensor:
        x = x + ops.mul(self.dropout(self.ff1(self.ff1_norm(x))), 0.5)
        h = self.att_norm(x)
        x = x + self.dropout(self.att(h, h, key_mask))
        x = x + self.conv(self.conv_norm(x), frame_mask)
        x = x + ops.mul(self.dropout(self.ff2(self.ff2_norm(x))), 0.5)
        return self.final_norm(x)


class ConformerEncoder(Module):
    def __init__(self, cfg, source: DropoutSource, rng: np.random.Generator):
        self.subsample = Conv2dSubsampling(cfg.feature_dim, cfg.d_model, cfg.subsample_factor, rng)
        self.layers = [
            ConformerLayer(cfg.d_model, cfg.heads, cfg.ffn_dim, cfg.conv_kernel, source, cfg.dropout, rng)
            for _ in range(cfg.enc_layers)
        ]
        self.dropout = Dropout(cfg.dropout, source)
        self.d = cfg.d_model

    def __call__(self, x: Tensor, lengths) -> Tuple[Tensor, np.ndarray]:
        if x.ndim != 3:
            raise ShapeError("encode", f"features must be (B, T, F), got {x.shape}")
        h, lens = self.subsample(x, lengths)
        if np.any(lens < 1):
            raise ShapeError("encode", "utterance too short for subsampling")
        t1 = h.shape[1]
        h = self.dropout(ops.add(h, sinusoidal_positions(t1, self.d)))
        valid = length_mask(lens, t1)
        key_mask = ~valid[:, None, None, :]
        frame_mask = valid.astype(np.float64)[:, :, None]
        for layer in self.layers:
            h = layer(h, key_mask, frame_mask)
        return h, lens
