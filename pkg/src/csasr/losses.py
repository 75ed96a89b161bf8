"""CTC, label-smoothed cross entropy and the multi-task objectives."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import ops
from .autodiff.tensor import ShapeError, Tensor, as_tensor

logger = logging.getLogger(__name__)

NEG_INF = -np.inf


def _extended(target: Sequence[int], blank: int) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = np.asarray(target, dtype=np.int64)
    return ext


def _skip_allowed(ext: np.ndarray, blank: int) -> np.ndarray:
    """allow[s]: the transition s-2 -> s is legal."""
    allow = np.zeros(len(ext), dtype=bool)
    allow[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return allow


def ctc_alpha(logp: np.ndarray, target: Sequence[int], blank: int) -> np.ndarray:
    """Forward log-variables alpha[t, s] (inclusive of the frame-t emission)."""
    t_len = logp.shape[0]
    ext = _extended(target, blank)
    s_len = len(ext)
    allow = _skip_allowed(ext, blank)
    emit = logp[:, ext]
    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(allow[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]
    return alpha


def ctc_forward_backward(
    logp: np.ndarray, target: Sequence[int], blank: int
) -> Tuple[float, np.ndarray, bool]:
    """Negative log-likelihood and its gradient w.r.t. ``logp`` (T x V).

    Returns ``(nll, grad, feasible)``. An infeasible target (too long for T)
    gives ``nll = inf``, a zero gradient and ``feasible = False``.
    """
    logp = np.asarray(logp, dtype=np.float64)
    t_len, _ = logp.shape
    ext = _extended(target, blank)
    s_len = len(ext)
    if t_len == 0:
        return float("inf"), np.zeros_like(logp), False
    allow = _skip_allowed(ext, blank)
    alpha = ctc_alpha(logp, target, blank)
    if s_len > 1:
        log_lik = np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    else:
        log_lik = alpha[-1, -1]
    if not np.isfinite(log_lik):
        return float("inf"), np.zeros_like(logp), False

    emit = logp[:, ext]
    beta = np.full((t_len, s_len), NEG_INF)
    beta[-1, -1] = 0.0
    if s_len > 1:
        beta[-1, -2] = 0.0
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(allow[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc
    occ = np.exp(alpha + beta - log_lik)
    grad = np.zeros_like(logp)
    for s in range(s_len):
        grad[:, ext[s]] -= occ[:, s]
    return float(-log_lik), grad, True


def ctc_loss(
    frame_logprobs: Tensor,
    target: Sequence[int],
    blank: int = 0,
) -> Tensor:
    """Negative log-likelihood of ``target`` under per-frame log-probs (T x V).

    Infeasible targets produce ``inf`` (check :attr:`Tensor.op` is ``ctc_loss``
    and the value with ``np.isinf``) rather than raising.
    """
    x = as_tensor(frame_logprobs)
    if x.ndim != 2:
        raise ShapeError("ctc_loss", f"expected T x V log-probs, got {x.shape}")
    nll, grad, feasible = ctc_forward_backward(x.data, target, blank)
    if not feasible:
        logger.warning("CTC target of length %d infeasible for %d frames", len(target), x.shape[0])
    return Tensor._from_op(np.asarray(nll), "ctc_loss", (x,), lambda g: (g * grad,))


def batch_ctc_loss(
    frame_logprobs: Tensor,
    input_lengths: Sequence[int],
    targets: Sequence[Sequence[int]],
    blank: int = 0,
) -> Tuple[Tensor, int]:
    """Mean over utterances of NLL / max(|target|, 1).

    Infeasible utterances are dropped from the mean; their count is returned.
    """
    x = as_tensor(frame_logprobs)
    b = x.shape[0]
    grads = np.zeros_like(x.data)
    terms = []
    infeasible = 0
    for i in range(b):
        t_len = int(input_lengths[i])
        nll, g, ok = ctc_forward_backward(x.data[i, :t_len], targets[i], blank)
        if not ok:
            infeasible += 1
            continue
        w = 1.0 / max(len(targets[i]), 1)
        terms.append(nll * w)
        grads[i, :t_len] = g * w
    n = max(b - infeasible, 1)
    grads /= n
    value = np.asarray(sum(terms) / n if terms else 0.0)
    if infeasible:
        logger.warning("skipped %d infeasible CTC utterance(s)", infeasible)
    return Tensor._from_op(value, "ctc_loss", (x,), lambda g: (g * grads,)), infeasible


def label_smoothed_ce(
    logits: Tensor,
    targets,
    epsilon: float,
    weights: Optional[np.ndarray] = None,
) -> Tensor:
    """Label-smoothed cross entropy.

    Per position: (1 - eps) * (-log p_target) + eps * mean_c(-log p_c).
    Without ``weights`` the result is the plain mean over positions; padding
    is excluded by giving it zero weight.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    c = logits.shape[-1]
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"label smoothing must be in [0, 1), got {epsilon}")
    if targets.shape != logits.shape[:-1]:
        raise ShapeError("label_smoothed_ce", f"targets {targets.shape} vs logits {logits.shape[:-1]}")
    if weights is None:
        weights = np.full(targets.shape, 1.0 / max(targets.size, 1))
    valid = weights != 0
    if valid.any() and (targets[valid].min() < 0 or targets[valid].max() >= c):
        raise ValueError(f"target id outside [0, {c})")
    onehot = np.zeros(logits.shape)
    safe = np.where(valid, targets, 0)
    np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
    q = (1.0 - epsilon) * onehot + epsilon / c
    logp = ops.log_softmax(logits)
    per_pos = ops.sum(ops.mul(logp, -q), axis=-1)
    return ops.sum(ops.mul(per_pos, weights))


def utterance_mean_weights(lengths: Sequence[int], max_len: int) -> np.ndarray:
    """Weights giving the mean over utterances of per-utterance position means."""
    b = len(lengths)
    w = np.zeros((b, max_len))
    for i, n in enumerate(lengths):
        if n > 0:
            w[i, :n] = 1.0 / (n * b)
    return w


def asr_loss(l_ctc, l_att, alpha: float):
    """alpha * L_ctc + (1 - alpha) * L_att."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    return alpha * l_ctc + (1.0 - alpha) * l_att


def joint_loss(l_ctc, l_att, l_ld, alpha: float, beta: float):
    """alpha * L_ctc + (1 - alpha) * L_att + beta * L_ld."""
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    return asr_loss(l_ctc, l_att, alpha) + beta * l_ld


@dataclass
class LossBreakdown:
    l_ctc: float
    l_att: float
    l_ld: Optional[float]
    total: float
    alpha: float
    beta: float

    def to_dict(self):
        return {
            "l_ctc": self.l_ctc,
            "l_att": self.l_att,
            "l_ld": self.l_ld,
            "total": self.total,
            "alpha": self.alpha,
            "beta": self.beta,
        }

    @classmethod
    def mean(cls, items: List["LossBreakdown"], weights: Optional[Sequence[float]] = None) -> "LossBreakdown":
        w = np.asarray(weights if weights is not None else [1.0] * len(items), dtype=np.float64)
        w = w / w.sum()

        def avg(attr):
            vals = [getattr(it, attr) for it in items]
            if any(v is None for v in vals):
                return None
            return float(np.dot(w, vals))

        return cls(avg("l_ctc"), avg("l_att"), avg("l_ld"), avg("total"), items[0].alpha, items[0].beta)
