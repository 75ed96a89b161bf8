"""Joint CTC/attention beam search with CTC prefix scoring.

Hypotheses advance synchronously: every step scores all emittable tokens for
every live prefix in one batched decoder call. Scores only decrease when a
prefix grows, so search stops as soon as the best finished hypothesis scores
at least as high as the best live one.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .autodiff.tensor import Tensor, no_grad
from .model.asr import CAUSAL, EncoderOutput

log = logging.getLogger(__name__)

NEG_INF = -np.inf


class PrefixStateError(ValueError):
    pass


@dataclass
class CTCPrefixState:
    """Forward variables of a prefix: ``r_nonblank[t]`` / ``r_blank[t]`` are the
    log-probabilities of having emitted the prefix by frame ``t`` with the last
    frame non-blank / blank. ``score`` is the prefix log-probability."""

    prefix: Tuple[int, ...]
    r_nonblank: np.ndarray
    r_blank: np.ndarray
    score: float

    def total(self) -> float:
        """Log-probability that the whole utterance is exactly this prefix."""
        return float(np.logaddexp(self.r_nonblank[-1], self.r_blank[-1]))


def initial_state(frame_logprobs: np.ndarray, blank: int = 0) -> CTCPrefixState:
    logp = np.asarray(frame_logprobs, dtype=np.float64)
    r_b = np.cumsum(logp[:, blank])
    r_n = np.full(logp.shape[0], NEG_INF)
    return CTCPrefixState((), r_n, r_b, 0.0)


def extend_all(
    frame_logprobs: np.ndarray, state: CTCPrefixState, tokens: np.ndarray, blank: int = 0
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Score every token in ``tokens`` as the next label of ``state.prefix``.

    Returns (prefix scores (K,), r_nonblank (T, K), r_blank (T, K)).
    """
    logp = np.asarray(frame_logprobs, dtype=np.float64)
    tokens = np.asarray(tokens, dtype=np.int64)
    if np.any(tokens == blank):
        raise PrefixStateError("blank cannot extend a prefix")
    T = logp.shape[0]
    k = len(tokens)
    emit = logp[:, tokens]
    blank_lp = logp[:, blank][:, None]
    both = np.logaddexp(state.r_blank, state.r_nonblank)
    phi = np.repeat(both[:, None], k, axis=1)
    if state.prefix:
        # a repeated label needs a blank in between
        same = tokens == state.prefix[-1]
        phi[:, same] = state.r_blank[:, None]
    r_n = np.full((T, k), NEG_INF)
    r_b = np.full((T, k), NEG_INF)
    if not state.prefix:
        r_n[0] = emit[0]
    with np.errstate(invalid="ignore"):
        for t in range(1, T):
            r_n[t] = np.logaddexp(r_n[t - 1], phi[t - 1]) + emit[t]
            r_b[t] = np.logaddexp(r_b[t - 1], r_n[t - 1]) + blank_lp[t]
        if T > 1:
            starts = phi[:-1] + emit[1:]
            score = np.logaddexp(r_n[0], np.logaddexp.reduce(starts, axis=0))
        else:
            score = r_n[0].copy()
    return score, r_n, r_b


def ctc_prefix_score(
    frame_logprobs: np.ndarray,
    prefix: Sequence[int],
    next_token: int,
    state: Optional[CTCPrefixState] = None,
    blank: int = 0,
    eos: Optional[int] = None,
) -> Tuple[float, Optional[CTCPrefixState]]:
    """Log-probability of ``prefix + [next_token]`` under the CTC head.

    For an ordinary label this is the prefix probability (sum over every
    label sequence starting with the extended prefix). For ``eos`` it is the
    probability of ``prefix`` being the complete output; the returned state
    is then None. ``state`` must describe ``prefix`` exactly; when omitted it
    is rebuilt from scratch.
    """
    prefix = tuple(int(p) for p in prefix)
    if state is None:
        state = initial_state(frame_logprobs, blank)
        for i, tok in enumerate(prefix):
            _, state = ctc_prefix_score(frame_logprobs, prefix[:i], tok, state, blank)
    elif state.prefix != prefix:
        raise PrefixStateError(f"state describes {state.prefix}, not {prefix}")
    if eos is not None and next_token == eos:
        return state.total(), None
    if next_token == blank:
        raise PrefixStateError("blank cannot extend a prefix")
    score, r_n, r_b = extend_all(frame_logprobs, state, np.array([next_token]), blank)
    new = CTCPrefixState(prefix + (int(next_token),), r_n[:, 0], r_b[:, 0], float(score[0]))
    return new.score, new


def combine(ctc_score, att_score, alpha: float):
    """alpha * ctc + (1 - alpha) * att, with a zero weight silencing its term
    even when that term is -inf."""
    ctc_score = np.asarray(ctc_score, dtype=np.float64)
    att_score = np.asarray(att_score, dtype=np.float64)
    out = np.zeros(np.broadcast(ctc_score, att_score).shape)
    if alpha > 0:
        out = out + alpha * ctc_score
    if alpha < 1:
        out = out + (1.0 - alpha) * att_score
    return out


@dataclass
class Hypothesis:
    prefix: Tuple[int, ...]
    att_logprob: float
    ctc_logprob: float
    combined_score: float
    ctc_state: Optional[CTCPrefixState] = None
    ld_state: Optional[np.ndarray] = None
    finished: bool = False

    def tokens(self) -> List[int]:
        """Label ids without the leading sos and trailing eos."""
        end = len(self.prefix) - 1 if self.finished else len(self.prefix)
        return list(self.prefix[1:end])


@dataclass
class BeamResult:
    hypotheses: List[Hypothesis]
    unterminated: bool = False
    steps: int = 0
    ld_calls: int = 0

    @property
    def best(self) -> Hypothesis:
        return self.hypotheses[0]


def _emittable(vocab_size: int, blank: int, eos: int) -> np.ndarray:
    ids = np.arange(vocab_size)
    return ids[(ids != blank) & (ids != eos)]


def beam_search(
    model,
    X,
    beam: int = 10,
    alpha_decode: float = 0.4,
    max_len: Optional[int] = None,
    nbest: int = 1,
    enc: Optional[EncoderOutput] = None,
) -> BeamResult:
    """Decode one utterance ``X`` (T x F).

    Finished hypotheses come back sorted by combined score. ``max_len`` caps
    the number of labels (default: encoder length, the most CTC can emit).
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if not 0.0 <= alpha_decode <= 1.0:
        raise ValueError("alpha_decode must lie in [0, 1]")
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            return _search(model, X, beam, alpha_decode, max_len, nbest, enc)
    finally:
        model.train(was_training)


def _search(model, X, beam, alpha, max_len, nbest, enc) -> BeamResult:
    cfg = model.cfg
    blank, eos = model.blank, model.sos_eos
    if enc is None:
        enc = model.encode(X)
    ctc_lp = model.ctc_head(enc.H).data[0, : int(enc.lengths[0])]
    T1 = ctc_lp.shape[0]
    if max_len is None:
        max_len = T1
    labels = _emittable(cfg.vocab_size, blank, eos)
    use_lpb = cfg.use_lpb

    root = Hypothesis(
        prefix=(eos,),
        att_logprob=0.0,
        ctc_logprob=0.0,
        combined_score=0.0,
        ctc_state=initial_state(ctc_lp, blank),
        ld_state=np.zeros((0, 4)) if use_lpb else None,
    )
    live = [root]
    finished: List[Hypothesis] = []
    ld_calls = 0
    step = 0
    while live:
        ids = np.array([h.prefix for h in live], dtype=np.int64)
        ld_post = None
        if use_lpb:
            # causal posteriors are append-only: only the newest position is
            # taken from this call, earlier rows come from the cache
            post = model.ld_decode(ids, enc, mode=CAUSAL).data
            ld_calls += 1
            for i, h in enumerate(live):
                h.ld_state = np.concatenate([h.ld_state, post[i, -1:]], axis=0)
            ld_post = Tensor(np.stack([h.ld_state for h in live]))
        emb = model.decoder_inputs(ids, ld_post)
        att_lp = model.asr_decode_step(emb, enc).data[:, -1]

        cands = []  # (score, hyp index, token, ctc, att, col)
        ext = []
        can_grow = len(live[0].prefix) - 1 < max_len
        for i, h in enumerate(live):
            if can_grow:
                if alpha > 0:
                    ctc_s, r_n, r_b = extend_all(ctc_lp, h.ctc_state, labels, blank)
                else:
                    ctc_s, r_n, r_b = np.zeros(len(labels)), None, None
                att_s = h.att_logprob + att_lp[i, labels]
                comb = combine(ctc_s, att_s, alpha)
                ext.append((r_n, r_b))
                for j in range(len(labels)):
                    cands.append((comb[j], i, int(labels[j]), ctc_s[j], att_s[j], j))
            else:
                ext.append((None, None))
            ctc_e = h.ctc_state.total() if alpha > 0 else 0.0
            att_e = h.att_logprob + att_lp[i, eos]
            cands.append((float(combine(ctc_e, att_e, alpha)), i, eos, ctc_e, att_e, -1))

        scores = np.array([c[0] for c in cands])
        order = np.argsort(-scores, kind="stable")
        keep = [cands[k] for k in order[:beam] if np.isfinite(scores[k])]

        new_live = []
        for score, i, tok, ctc_s, att_s, col in keep:
            parent = live[i]
            if tok == eos:
                finished.append(
                    Hypothesis(parent.prefix + (eos,), float(att_s), float(ctc_s), float(score),
                               None, parent.ld_state, finished=True)
                )
                continue
            r_n, r_b = ext[i]
            state = None
            if r_n is not None:
                state = CTCPrefixState(parent.prefix[1:] + (tok,), r_n[:, col], r_b[:, col], float(ctc_s))
            new_live.append(
                Hypothesis(parent.prefix + (tok,), float(att_s), float(ctc_s), float(score),
                           state, parent.ld_state.copy() if use_lpb else None)
            )
        step += 1
        log.debug("step %d: %d live, %d finished", step, len(new_live), len(finished))
        if not new_live:
            if not finished:
                live_best = sorted(live, key=lambda h: -h.combined_score)
                warnings.warn("no hypothesis terminated; returning best unterminated prefix")
                return BeamResult(live_best[:nbest], True, step, ld_calls)
            break
        live = new_live
        if len(finished) >= nbest:
            ranked = sorted(f.combined_score for f in finished)[::-1]
            if ranked[nbest - 1] >= max(h.combined_score for h in live):
                break

    finished.sort(key=lambda h: -h.combined_score)
    return BeamResult(finished[:nbest], False, step, ld_calls)


def greedy_attention(model, X, max_len: Optional[int] = None) -> List[int]:
    return beam_search(model, X, beam=1, alpha_decode=0.0, max_len=max_len).best.tokens()
