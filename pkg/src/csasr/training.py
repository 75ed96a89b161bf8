"""Experiment configuration, optimiser, training loop, checkpoint averaging
and evaluation."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import CheckpointError, backward, load_checkpoint, no_grad, save_checkpoint
from .corpus import Corpus, CorpusConfig, CorpusError, generate_corpus, global_mvn
from .decoding import beam_search
from .losses import LossBreakdown
from .metrics import ld_accuracy, score, to_mixed_units
from .model import FULL_CONTEXT, CAUSAL, ConfigError, HybridCSASR, ModelConfig, collate
from .vocab import decode_ids

log = logging.getLogger(__name__)

SYSTEMS = ("S0", "S2.1", "S2.2", "S2.4", "S2.5", "S2.7", "S2.8", "S3.1", "S3.2", "S3.3")


class DivergenceError(RuntimeError):
    def __init__(self, message: str, dump_path: Optional[str] = None):
        super().__init__(message)
        self.dump_path = dump_path


def system_switches(system: str, beta: Optional[float] = None) -> Dict[str, Any]:
    """ModelConfig fields selecting one row of the ablation inventory.

    +LD trains the LD decoder jointly; +LPB alone feeds its posteriors to the
    ASR decoder with backpropagation from the LD branch intercepted; +LD +LPB
    does both jointly; +GRL reverses the LD gradient into the encoder.
    """
    table = {
        "S0": dict(use_ld=False, use_lpb=False, use_grl=False, beta=0.0),
        "S2.1": dict(use_ld=True, ld_full_context=True, beta=0.8),
        "S2.2": dict(use_ld=True, ld_full_context=False, beta=0.8),
        "S2.4": dict(use_ld=True, use_lpb=True, lpb_stop_gradient=True, ld_full_context=True, beta=0.8),
        "S2.5": dict(use_ld=True, use_lpb=True, lpb_stop_gradient=True, ld_full_context=False, beta=0.8),
        "S2.7": dict(use_ld=True, use_lpb=True, ld_full_context=True, beta=0.8),
        "S2.8": dict(use_ld=True, use_lpb=True, ld_full_context=False, beta=0.8),
        "S3.1": dict(use_ld=True, use_grl=True, ld_full_context=True, beta=0.2),
        "S3.2": dict(use_ld=True, use_grl=True, ld_full_context=True, beta=0.5),
        "S3.3": dict(use_ld=True, use_grl=True, ld_full_context=True, beta=0.8),
    }
    if system not in table:
        raise ConfigError(f"unknown system id {system!r}; known: {', '.join(SYSTEMS)}")
    out = dict(use_ld=False, use_lpb=False, use_grl=False, lpb_stop_gradient=False, ld_full_context=True)
    out.update(table[system])
    if beta is not None:
        if system == "S0":
            raise ConfigError("the baseline has no beta")
        out["beta"] = float(beta)
    return out


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    system: Optional[str] = None
    lr: float = 1e-3
    warmup_steps: int = 500
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    grad_clip: float = 5.0
    adam_betas: Tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-9
    keep_best: int = 10
    beam: int = 10
    alpha_decode: float = 0.4
    beta_sweep: List[float] = field(default_factory=list)
    train_limit: Optional[int] = None
    valid_mer_utts: int = 50
    beta: Optional[float] = None

    def resolved_model(self, vocab_size: Optional[int] = None) -> ModelConfig:
        """Model config with the system switches, a beta override, corpus
        dimensions and vocabulary size filled in."""
        m = dataclasses.replace(self.model)
        if self.system is not None:
            m = dataclasses.replace(m, **system_switches(self.system, self.beta))
        elif self.beta is not None:
            m = dataclasses.replace(m, beta=float(self.beta))
        m = dataclasses.replace(
            m, feature_dim=self.corpus.feature_dim, subsample_factor=self.corpus.subsample_factor
        )
        if vocab_size is not None:
            m = dataclasses.replace(m, vocab_size=vocab_size)
        return m

    def with_beta(self, beta: float) -> "ExperimentConfig":
        return dataclasses.replace(self, beta=float(beta))

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr <= 0 or self.warmup_steps < 1:
            raise ConfigError("lr must be positive and warmup_steps >= 1")
        if self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive")
        if self.keep_best < 1 or self.beam < 1:
            raise ConfigError("keep_best and beam must be >= 1")
        if not 0.0 <= self.alpha_decode <= 1.0:
            raise ConfigError("alpha_decode must lie in [0, 1]")
        try:
            self.corpus.validate()
        except CorpusError as exc:
            raise ConfigError(str(exc)) from exc
        self.resolved_model().validate()

    def to_dict(self) -> Dict[str, Any]:
        d = {
            f.name: getattr(self, f.name)
            for f in dataclasses.fields(self)
            if f.name not in ("model", "corpus")
        }
        d["adam_betas"] = list(self.adam_betas)
        d["model"] = self.model.to_dict()
        d["corpus"] = dataclasses.asdict(self.corpus)
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment fields: {sorted(unknown)}")
        model = ModelConfig.from_dict(d.pop("model", {}))
        corpus = CorpusConfig.from_dict(d.pop("corpus", {}))
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(model=model, corpus=corpus, **d)


def noam_lr(step: int, peak: float, warmup: int) -> float:
    """Linear warm-up to ``peak`` over ``warmup`` steps, then decay with the
    inverse square root of the step."""
    step = max(step, 1)
    return peak * min(step / warmup, math.sqrt(warmup / step))


class Adam:
    def __init__(self, params: Dict[str, Any], betas=(0.9, 0.98), eps: float = 1e-9):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params: Dict[str, Any], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``;
    returns the norm before clipping."""
    sq = sum(float(np.sum(p.grad * p.grad)) for p in params.values() if p.grad is not None)
    norm = math.sqrt(sq)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


def make_batches(utts, batch_size: int, rng: Optional[np.random.Generator]) -> List[list]:
    """Shuffle, then sort by length inside pools of 8 batches to limit padding;
    the batch order is shuffled again. ``rng=None`` keeps corpus order."""
    idx = np.arange(len(utts)) if rng is None else rng.permutation(len(utts))
    pool = batch_size * 8
    batches = []
    for start in range(0, len(idx), pool):
        chunk = sorted(idx[start : start + pool], key=lambda i: utts[i].n_frames)
        batches.extend(chunk[i : i + batch_size] for i in range(0, len(chunk), batch_size))
    if rng is not None:
        order = rng.permutation(len(batches))
        batches = [batches[i] for i in order]
    return [[utts[i] for i in b] for b in batches]


@dataclass
class EpochRecord:
    epoch: int
    train: LossBreakdown
    valid: LossBreakdown
    lr: float
    seconds: float

    def to_dict(self):
        return {
            "epoch": self.epoch,
            "train": self.train.to_dict(),
            "valid": self.valid.to_dict(),
            "lr": self.lr,
            "seconds": self.seconds,
        }


@dataclass
class RunRecord:
    config: Dict[str, Any]
    epochs: List[EpochRecord] = field(default_factory=list)
    step_losses: List[float] = field(default_factory=list)
    best_valid_trace: List[float] = field(default_factory=list)
    checkpoints: List[str] = field(default_factory=list)
    averaged_checkpoint: Optional[str] = None
    valid_mer: Optional[float] = None
    wall_clock: float = 0.0

    def to_dict(self):
        return {
            "config": self.config,
            "epochs": [e.to_dict() for e in self.epochs],
            "step_losses": self.step_losses,
            "best_valid_trace": self.best_valid_trace,
            "checkpoints": self.checkpoints,
            "averaged_checkpoint": self.averaged_checkpoint,
            "valid_mer": self.valid_mer,
            "wall_clock": self.wall_clock,
        }


def _dump_divergence(out_dir: Optional[Path], batch, breakdown: Optional[LossBreakdown], step: int) -> Optional[str]:
    if out_dir is None:
        return None
    path = out_dir / "divergence_dump.npz"
    np.savez(
        path,
        uids=np.array(batch.uids),
        feats=batch.feats,
        feat_lengths=batch.feat_lengths,
        ys_in=batch.ys_in,
        ys_out=batch.ys_out,
        step=step,
        losses=json.dumps(breakdown.to_dict() if breakdown else None),
    )
    return str(path)


def batch_loss(model: HybridCSASR, utts) -> LossBreakdown:
    with no_grad():
        _, br = model(collate(utts, model.sos_eos))
    return br


def dataset_loss(model: HybridCSASR, utts, batch_size: int) -> LossBreakdown:
    was = model.training
    model.eval()
    try:
        parts, sizes = [], []
        for b in make_batches(utts, batch_size, None):
            parts.append(batch_loss(model, b))
            sizes.append(len(b))
        return LossBreakdown.mean(parts, sizes)
    finally:
        model.train(was)


def prepare_corpus(cfg: ExperimentConfig, corpus: Optional[Corpus] = None) -> Corpus:
    """Generate (if needed) and mean/variance-normalise the corpus."""
    if corpus is None:
        corpus = generate_corpus(cfg.corpus)
    if corpus.mvn is None:
        corpus, _ = global_mvn(corpus)
    return corpus


def build_model(cfg: ExperimentConfig, corpus: Corpus) -> HybridCSASR:
    vocab = corpus.vocab
    mcfg = cfg.resolved_model(len(vocab))
    return HybridCSASR(mcfg, blank=vocab.blank, sos_eos=vocab.sos_eos, seed=cfg.seed)


def _checkpoint_meta(cfg: ExperimentConfig, model: HybridCSASR, corpus: Corpus, **extra) -> Dict[str, Any]:
    meta = {
        "model": model.cfg.to_dict(),
        "experiment": cfg.to_dict(),
        "vocab": {"tokens": list(corpus.vocab.tokens), "classes": list(corpus.vocab.classes)},
    }
    meta.update(extra)
    return meta


def train(
    cfg: ExperimentConfig,
    corpus: Optional[Corpus] = None,
    out_dir: Union[str, Path, None] = None,
) -> Tuple[RunRecord, HybridCSASR]:
    """Train one system; returns the run record and the model holding the
    average of the ``keep_best`` checkpoints with lowest validation loss."""
    cfg.validate()
    t_start = time.time()
    corpus = prepare_corpus(cfg, corpus)
    model = build_model(cfg, corpus)
    train_utts = corpus["train"]
    if cfg.train_limit is not None:
        train_utts = train_utts[: cfg.train_limit]
    valid_utts = corpus["valid"]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)

    params = model.parameters()
    opt = Adam(params, cfg.adam_betas, cfg.adam_eps)
    rng = np.random.default_rng([cfg.seed, 1])
    record = RunRecord(config=cfg.to_dict())
    kept: List[Tuple[float, int, Any]] = []  # (valid loss, epoch, path or state)
    best = math.inf
    step = 0
    lr = 0.0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.time()
        model.train()
        parts, sizes = [], []
        for utts in make_batches(train_utts, cfg.batch_size, rng):
            batch = collate(utts, model.sos_eos)
            step += 1
            model.zero_grad()
            total, br = model(batch)
            if not math.isfinite(br.total):
                path = _dump_divergence(out, batch, br, step)
                raise DivergenceError(f"non-finite loss at step {step}: {br.to_dict()}", path)
            backward(total)
            norm = clip_grad_norm(params, cfg.grad_clip)
            if not math.isfinite(norm):
                path = _dump_divergence(out, batch, br, step)
                raise DivergenceError(f"non-finite gradient norm at step {step}", path)
            lr = noam_lr(step, cfg.lr, cfg.warmup_steps)
            opt.step(lr)
            record.step_losses.append(br.total)
            parts.append(br)
            sizes.append(len(utts))
        train_br = LossBreakdown.mean(parts, sizes)
        valid_br = dataset_loss(model, valid_utts, cfg.batch_size)
        ep = EpochRecord(epoch, train_br, valid_br, lr, time.time() - t0)
        record.epochs.append(ep)
        best = min(best, valid_br.total)
        record.best_valid_trace.append(best)
        log.info(
            "epoch %d train %.4f valid %.4f (%.1fs)", epoch, train_br.total, valid_br.total, ep.seconds
        )

        if out is not None:
            path = out / "checkpoints" / f"epoch{epoch:03d}.ckpt"
            save_checkpoint(path, model.state_dict(), _checkpoint_meta(cfg, model, corpus, epoch=epoch, valid_loss=valid_br.total))
            item: Any = str(path)
        else:
            item = model.state_dict()
        kept.append((valid_br.total, epoch, item))
        kept.sort(key=lambda x: (x[0], x[1]))
        for _, _, dropped in kept[cfg.keep_best :]:
            if isinstance(dropped, str):
                Path(dropped).unlink(missing_ok=True)
        kept = kept[: cfg.keep_best]

    record.checkpoints = [k[2] for k in kept if isinstance(k[2], str)]
    if out is not None:
        params_avg, _ = average_checkpoints(record.checkpoints)
        avg_path = out / "averaged.ckpt"
        save_checkpoint(
            avg_path,
            params_avg,
            _checkpoint_meta(cfg, model, corpus, averaged_epochs=[k[1] for k in kept]),
        )
        record.averaged_checkpoint = str(avg_path)
    else:
        params_avg = average_states([k[2] for k in kept])
    model.load_state_dict(params_avg)
    model.eval()

    if cfg.valid_mer_utts > 0:
        rep = evaluate_model(model, corpus, "valid", beam=1, alpha_decode=cfg.alpha_decode, limit=cfg.valid_mer_utts)
        record.valid_mer = rep["mer"]
    record.wall_clock = time.time() - t_start
    if out is not None:
        (out / "run_record.json").write_text(json.dumps(record.to_dict(), indent=1))
    return record, model


def average_states(states: Sequence[Dict[str, np.ndarray]]) -> Dict[str, np.ndarray]:
    """Parameter-wise arithmetic mean."""
    if not states:
        raise CheckpointError("nothing to average")
    keys = set(states[0])
    for s in states[1:]:
        if set(s) != keys:
            raise CheckpointError("checkpoints hold different parameter names")
        for k in keys:
            if s[k].shape != states[0][k].shape:
                raise CheckpointError(f"shape mismatch for {k}: {s[k].shape} vs {states[0][k].shape}")
    out = {}
    for k in states[0]:
        acc = np.zeros_like(states[0][k], dtype=np.float64)
        for s in states:
            acc += s[k]
        out[k] = acc / len(states)
    return out


def average_checkpoints(
    paths: Sequence[Union[str, Path]], out_path: Union[str, Path, None] = None
) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    loaded = [load_checkpoint(p) for p in paths]
    if not loaded:
        raise CheckpointError("nothing to average")
    params = average_states([p for p, _ in loaded])
    meta = dict(loaded[0][1])
    meta["averaged_from"] = [str(p) for p in paths]
    if out_path is not None:
        save_checkpoint(out_path, params, meta)
    return params, meta


def model_from_checkpoint(path: Union[str, Path]) -> Tuple[HybridCSASR, Dict[str, Any]]:
    params, meta = load_checkpoint(path)
    if "model" not in meta or "vocab" not in meta:
        raise CheckpointError(f"{path}: checkpoint carries no model description")
    mcfg = ModelConfig.from_dict(meta["model"])
    tokens = meta["vocab"]["tokens"]
    model = HybridCSASR(mcfg, blank=tokens.index("<blank>"), sos_eos=tokens.index("<sos/eos>"))
    try:
        model.load_state_dict(params)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: parameters do not match the stored model ({exc})") from exc
    return model.eval(), meta


def teacher_forced_ld(model: HybridCSASR, utts) -> Tuple[List[List[int]], List[List[int]]]:
    """Reference and argmax LD labels of the decoder-input tokens, using the
    regime the LD decoder was trained in."""
    mode = FULL_CONTEXT if model.cfg.ld_full_context else CAUSAL
    refs, preds = [], []
    with no_grad():
        for b in make_batches(utts, 16, None):
            batch = collate(b, model.sos_eos)
            enc = model.encode(batch.feats, batch.feat_lengths)
            post = model.ld_decode(batch.ys_in, enc, mode=mode, lengths=batch.dec_lengths).data
            for i, n in enumerate(batch.dec_lengths):
                refs.append(list(batch.ld_targets[i, :n]))
                preds.append(list(np.argmax(post[i, :n], axis=-1)))
    return refs, preds


def evaluate_model(
    model: HybridCSASR,
    corpus: Corpus,
    split: str,
    beam: int = 10,
    alpha_decode: float = 0.4,
    max_len: Optional[int] = None,
    nbest: int = 1,
    limit: Optional[int] = None,
    decode_path: Union[str, Path, None] = None,
) -> Dict[str, Any]:
    """Beam-search a split, score MER and LD accuracy; optionally write the
    decode JSON lines."""
    utts = corpus[split]
    if limit is not None:
        utts = utts[:limit]
    vocab = corpus.vocab
    model.eval()
    refs, hyps = [], []
    unterminated = 0
    sink = open(decode_path, "w") if decode_path is not None else None
    try:
        for u in utts:
            res = beam_search(model, u.features, beam=beam, alpha_decode=alpha_decode, max_len=max_len, nbest=nbest)
            unterminated += res.unterminated
            refs.append(to_mixed_units(decode_ids(u.target, vocab), vocab))
            hyps.append(to_mixed_units(decode_ids(res.best.tokens(), vocab), vocab))
            if sink is not None:
                row = {
                    "id": u.uid,
                    "kbest": [
                        {
                            "tokens": decode_ids(h.tokens(), vocab),
                            "att": h.att_logprob,
                            "ctc": h.ctc_logprob,
                            "combined": h.combined_score,
                        }
                        for h in res.hypotheses
                    ],
                }
                if model.cfg.use_lpb and res.best.ld_state is not None:
                    row["ld_posteriors"] = np.round(res.best.ld_state, 6).tolist()
                sink.write(json.dumps(row, ensure_ascii=False) + "\n")
    finally:
        if sink is not None:
            sink.close()
    report = score(refs, hyps)
    report.update(
        split=split,
        n_utts=len(utts),
        unterminated=unterminated,
        decode={"beam": beam, "alpha_decode": alpha_decode, "max_len": max_len},
    )
    if model.cfg.use_ld:
        r, p = teacher_forced_ld(model, utts)
        report["ld_accuracy"] = ld_accuracy(r, p)
    return report


def save_record(record: RunRecord, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(record.to_dict(), indent=1))
