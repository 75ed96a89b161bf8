"""Hybrid CTC/attention model with the auxiliary language-diarization decoder,
language-posterior bias and gradient-reversal variants."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..autodiff import ops
from ..autodiff.tensor import ShapeError, Tensor
from ..losses import (
    LossBreakdown,
    asr_loss,
    batch_ctc_loss,
    joint_loss,
    label_smoothed_ce,
    utterance_mean_weights,
)
from ..vocab import LD_SIZE
from .config import ModelConfig
from .decoder import TransformerDecoder
from .encoder import ConformerEncoder
from .nn import DropoutSource, Linear, Module

FULL_CONTEXT = "full_context"
CAUSAL = "causal"


@dataclass
class EncoderOutput:
    H: Tensor
    lengths: np.ndarray

    @property
    def T1(self) -> np.ndarray:
        return self.lengths


@dataclass
class Batch:
    uids: List[str]
    feats: np.ndarray
    feat_lengths: np.ndarray
    ys_in: np.ndarray
    ys_out: np.ndarray
    ld_targets: np.ndarray
    dec_lengths: np.ndarray
    targets: List[List[int]]

    def __len__(self) -> int:
        return len(self.uids)


def collate(utts, sos_eos: int) -> Batch:
    """Pad a list of :class:`~csasr.corpus.Utterance` into a training batch.

    Decoder input is ``[sos, w1..wN]``; ASR targets ``[w1..wN, eos]``; LD
    targets are the labels of the decoder-input tokens themselves.
    """
    b = len(utts)
    t_max = max(u.n_frames for u in utts)
    f = utts[0].features.shape[1]
    feats = np.zeros((b, t_max, f))
    n_max = max(len(u.tokens) - 1 for u in utts)
    ys_in = np.full((b, n_max), sos_eos, dtype=np.int64)
    ys_out = np.zeros((b, n_max), dtype=np.int64)
    ld = np.zeros((b, n_max), dtype=np.int64)
    for i, u in enumerate(utts):
        feats[i, : u.n_frames] = u.features
        n = len(u.tokens) - 1
        ys_in[i, :n] = u.tokens[:-1]
        ys_out[i, :n] = u.tokens[1:]
        ld[i, :n] = u.ld_labels[:-1]
    return Batch(
        uids=[u.uid for u in utts],
        feats=feats,
        feat_lengths=np.array([u.n_frames for u in utts]),
        ys_in=ys_in,
        ys_out=ys_out,
        ld_targets=ld,
        dec_lengths=np.array([len(u.tokens) - 1 for u in utts]),
        targets=[list(u.target) for u in utts],
    )


class HybridCSASR(Module):
    def __init__(self, cfg: ModelConfig, blank: int = 0, sos_eos: int = 3, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.blank = blank
        self.sos_eos = sos_eos
        rng = np.random.default_rng(seed)
        self.dropout_source = DropoutSource(seed + 1)
        self.encoder = ConformerEncoder(cfg, self.dropout_source, rng)
        self.ctc_out = Linear(cfg.d_model, cfg.vocab_size, rng)
        self.decoder = TransformerDecoder(
            cfg.vocab_size, cfg.vocab_size, cfg.dec_layers, cfg, self.dropout_source, rng
        )
        self.ld_decoder = None
        self.lpb_proj = None
        if cfg.use_ld:
            self.ld_decoder = TransformerDecoder(
                cfg.vocab_size, LD_SIZE, cfg.ld_layers, cfg, self.dropout_source, rng
            )
        if cfg.use_lpb:
            self.lpb_proj = Linear(cfg.d_model + LD_SIZE, cfg.d_model, rng)
        self.ld_forward_calls = 0

    # -- mode ---------------------------------------------------------------

    @property
    def training(self) -> bool:
        return self.dropout_source.training

    def train(self, mode: bool = True) -> "HybridCSASR":
        self.dropout_source.training = mode
        return self

    def eval(self) -> "HybridCSASR":
        return self.train(False)

    def ld_parameters(self) -> Dict[str, Tensor]:
        return {k: v for k, v in self.parameters().items() if k.startswith("ld_decoder.")}

    def encoder_parameters(self) -> Dict[str, Tensor]:
        return {k: v for k, v in self.parameters().items() if k.startswith("encoder.")}

    # -- blocks -------------------------------------------------------------

    def encode(self, feats, lengths=None) -> EncoderOutput:
        """Features (T x F) or (B x T x F) to encoder states H (B x T1 x D)."""
        x = feats if isinstance(feats, Tensor) else Tensor(np.asarray(feats, dtype=np.float64))
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        if lengths is None:
            lengths = np.full(x.shape[0], x.shape[1])
        H, lens = self.encoder(x, lengths)
        return EncoderOutput(H, np.asarray(lens))

    def ctc_head(self, H: Tensor) -> Tensor:
        """Per-frame log-probabilities over the full vocabulary (blank included)."""
        return ops.log_softmax(self.ctc_out(H))

    def grl(self, H: Tensor) -> Tensor:
        return ops.scale_grad(H, -self.cfg.grl_lambda)

    def lpb_gradient_barrier(self, posteriors: Tensor) -> Tensor:
        return ops.stop_gradient(posteriors)

    def lpb_augment(self, token_embeddings: Tensor, ld_posteriors: Tensor) -> Tensor:
        """Concatenate each embedding with its language posterior (width D + 4)
        and project back to D."""
        if self.lpb_proj is None:
            raise RuntimeError("model was built without language-posterior bias")
        if token_embeddings.shape[:-1] != ld_posteriors.shape[:-1]:
            raise ShapeError(
                "lpb_augment",
                f"length mismatch: embeddings {token_embeddings.shape} vs posteriors {ld_posteriors.shape}",
            )
        return self.lpb_proj(ops.concat([token_embeddings, ld_posteriors], axis=-1))

    def ld_logits(self, ids, memory: Tensor, memory_lengths, mode: str, lengths=None) -> Tensor:
        if self.ld_decoder is None:
            raise RuntimeError("model was built without an LD decoder")
        if mode not in (FULL_CONTEXT, CAUSAL):
            raise ValueError(f"unknown LD mode {mode!r}")
        self.ld_forward_calls += 1
        return self.ld_decoder(ids, memory, memory_lengths, causal=mode == CAUSAL, lengths=lengths)

    def ld_decode(self, ids, enc: EncoderOutput, mode: str = CAUSAL, lengths=None) -> Tensor:
        """Language posteriors (B x N x 4) for every decoder-input position."""
        return ops.softmax(self.ld_logits(ids, enc.H, enc.lengths, mode, lengths))

    def asr_decode_step(
        self, prefix_embeddings: Tensor, enc: EncoderOutput, lengths=None
    ) -> Tensor:
        """Log-posteriors over the vocabulary for the token following every
        prefix position (B x n x V); row ``n-1`` predicts position ``n+1``."""
        if prefix_embeddings.shape[1] == 0:
            raise ShapeError("asr_decode_step", "empty prefix")
        logits = self.decoder.forward_embedded(prefix_embeddings, enc.H, enc.lengths, causal=True, lengths=lengths)
        return ops.log_softmax(logits)

    def decoder_inputs(self, ids, ld_posteriors: Optional[Tensor] = None) -> Tensor:
        emb = self.decoder.embed_tokens(ids)
        if self.cfg.use_lpb:
            if ld_posteriors is None:
                raise ValueError("language-posterior bias needs LD posteriors")
            emb = self.lpb_augment(emb, ld_posteriors)
        return emb

    # -- training objective ---------------------------------------------------

    def loss_components(self, batch: Batch) -> Tuple[Tensor, Tensor, Optional[Tensor]]:
        """(L_ctc, L_att, L_ld) of a teacher-forced batch; L_ld is None without
        the LD decoder."""
        cfg = self.cfg
        enc = self.encode(batch.feats, batch.feat_lengths)
        ctc_logp = self.ctc_head(enc.H)
        l_ctc, _ = batch_ctc_loss(ctc_logp, enc.lengths, batch.targets, self.blank)
        weights = utterance_mean_weights(batch.dec_lengths, batch.ys_in.shape[1])

        l_ld = None
        posteriors = None
        if cfg.use_ld:
            memory = enc.H
            if cfg.use_grl:
                memory = self.grl(memory)
            elif cfg.lpb_stop_gradient:
                # LPB without joint optimisation: nothing flows from the LD
                # decoder back into the encoder
                memory = ops.stop_gradient(memory)
            mode = FULL_CONTEXT if cfg.ld_full_context else CAUSAL
            ld_logits = self.ld_logits(batch.ys_in, memory, enc.lengths, mode, batch.dec_lengths)
            l_ld = label_smoothed_ce(ld_logits, batch.ld_targets, cfg.label_smoothing, weights)
            if cfg.use_lpb:
                posteriors = ops.softmax(ld_logits)
                if cfg.lpb_stop_gradient:
                    posteriors = self.lpb_gradient_barrier(posteriors)

        emb = self.decoder_inputs(batch.ys_in, posteriors)
        att_logp = self.asr_decode_step(emb, enc, batch.dec_lengths)
        l_att = label_smoothed_ce(att_logp, batch.ys_out, cfg.label_smoothing, weights)
        return l_ctc, l_att, l_ld

    def forward(self, batch: Batch) -> Tuple[Tensor, LossBreakdown]:
        cfg = self.cfg
        l_ctc, l_att, l_ld = self.loss_components(batch)
        if l_ld is not None:
            total = joint_loss(l_ctc, l_att, l_ld, cfg.alpha, cfg.beta)
        else:
            total = asr_loss(l_ctc, l_att, cfg.alpha)
        breakdown = LossBreakdown(
            l_ctc=l_ctc.item(),
            l_att=l_att.item(),
            l_ld=l_ld.item() if l_ld is not None else None,
            total=total.item(),
            alpha=cfg.alpha,
            beta=cfg.beta if l_ld is not None else 0.0,
        )
        return total, breakdown

    __call__ = forward
