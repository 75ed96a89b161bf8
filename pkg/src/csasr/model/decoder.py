"""Transformer decoder shared by the ASR and language-diarization branches."""

from __future__ import annotations

from typing import Optional

import numpy as np

from ..autodiff import ops
from ..autodiff.tensor import Tensor
from .nn import (
    Dropout,
    DropoutSource,
    Embedding,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    causal_mask,
    length_mask,
    sinusoidal_positions,
)


class DecoderLayer(Module):
    def __init__(self, d: int, heads: int, d_ff: int, source: DropoutSource, p: float, rng):
        drop = Dropout(p, source)
        self.dropout = drop
        self.self_norm = LayerNorm(d)
        self.self_att = MultiHeadAttention(d, heads, drop, rng)
        self.src_norm = LayerNorm(d)
        self.src_att = MultiHeadAttention(d, heads, drop, rng)
        self.ff_norm = LayerNorm(d)
        self.ff = FeedForward(d, d_ff, "relu", drop, rng)

    def __call__(self, x: Tensor, memory: Tensor, self_mask, memory_mask) -> Tensor:
        h = self.self_norm(x)
        x = x + self.dropout(self.self_att(h, h, self_mask))
        x = x + self.dropout(self.src_att(self.src_norm(x), memory, memory_mask))
        return x + self.dropout(self.ff(self.ff_norm(x)))


class TransformerDecoder(Module):
    """Token embedding, decoder layers and an output projection to ``n_out``
    classes. ``causal`` selects the masked (left-to-right) or full-context
    self-attention regime."""

    def __init__(self, n_tokens: int, n_out: int, n_layers: int, cfg, source: DropoutSource, rng):
        d = cfg.d_model
        self.embed = Embedding(n_tokens, d, rng)
        self.layers = [DecoderLayer(d, cfg.heads, cfg.ffn_dim, source, cfg.dropout, rng) for _ in range(n_layers)]
        self.norm = LayerNorm(d)
        self.out = Linear(d, n_out, rng)
        self.dropout = Dropout(cfg.dropout, source)
        self.d = d

    def embed_tokens(self, ids) -> Tensor:
        return self.embed(np.asarray(ids, dtype=np.int64))

    def forward_embedded(
        self,
        emb: Tensor,
        memory: Tensor,
        memory_lengths,
        causal: bool,
        lengths: Optional[np.ndarray] = None,
    ) -> Tensor:
        b, n, _ = emb.shape
        x = self.dropout(ops.add(emb, sinusoidal_positions(n, self.d)))
        if lengths is None:
            key_block = np.zeros((b, n), dtype=bool)
        else:
            key_block = ~length_mask(lengths, n)
        self_mask = key_block[:, None, None, :]
        if causal:
            self_mask = self_mask | causal_mask(n)[None, None]
        t1 = memory.shape[1]
        memory_mask = ~length_mask(memory_lengths, t1)[:, None, None, :]
        for layer in self.layers:
            x = layer(x, memory, self_mask, memory_mask)
        return self.out(self.norm(x))

    def __call__(self, ids, memory: Tensor, memory_lengths, causal: bool, lengths=None) -> Tensor:
        return self.forward_embedded(self.embed_tokens(ids), memory, memory_lengths, causal, lengths)
