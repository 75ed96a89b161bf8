"""Tiny models and batches shared by the tests."""

import numpy as np

from csasr.model import Batch, HybridCSASR, ModelConfig

TINY = dict(d_model=8, heads=2, enc_layers=1, dec_layers=1, ld_layers=1, ffn_dim=16, conv_kernel=3,
            feature_dim=4, vocab_size=9, dropout=0.0)


def tiny_model(seed=0, **overrides) -> HybridCSASR:
    cfg = ModelConfig(**{**TINY, **overrides})
    return HybridCSASR(cfg, blank=0, sos_eos=3, seed=seed)


def random_batch(rng, b=2, t=13, f=4, n=4, v=9, sos=3) -> Batch:
    feats = rng.normal(size=(b, t, f))
    feat_lengths = np.array([t] + [t - 2] * (b - 1))
    labels = [i for i in range(1, v) if i != sos]
    targets = [list(rng.choice(labels, size=n - (i % 2))) for i in range(b)]
    n_max = max(len(x) for x in targets) + 1
    ys_in = np.full((b, n_max), sos)
    ys_out = np.zeros((b, n_max), dtype=np.int64)
    ld = np.zeros((b, n_max), dtype=np.int64)
    for i, tg in enumerate(targets):
        ys_in[i, 1 : len(tg) + 1] = tg
        ys_out[i, : len(tg)] = tg
        ys_out[i, len(tg)] = sos
        ld[i, 0] = 2
        ld[i, 1 : len(tg) + 1] = [0 if x < 6 else 1 for x in tg]
    return Batch(
        uids=[f"u{i}" for i in range(b)],
        feats=feats,
        feat_lengths=feat_lengths,
        ys_in=ys_in,
        ys_out=ys_out,
        ld_targets=ld,
        dec_lengths=np.array([len(tg) + 1 for tg in targets]),
        targets=targets,
    )


TINY_CORPUS = dict(n_units_per_language=4, feature_dim=4, n_train=24, n_valid=8, n_test=8,
                   min_words=1, max_words=3, frames_per_unit_mean=5, frames_per_unit_jitter=1)


def tiny_experiment(system="S0", **overrides):
    from csasr.corpus import CorpusConfig
    from csasr.model import ModelConfig
    from csasr.training import ExperimentConfig

    model = {k: v for k, v in TINY.items() if k not in ("feature_dim", "vocab_size")}
    base = dict(model=ModelConfig(**model), corpus=CorpusConfig(**TINY_CORPUS), system=system,
                epochs=2, batch_size=8, keep_best=2, beam=2, valid_mer_utts=4, warmup_steps=4)
    base.update(overrides)
    return ExperimentConfig(**base)
