import dataclasses
import logging

import numpy as np
import pytest

from csasr.corpus import (
    Corpus,
    CorpusConfig,
    CorpusError,
    cs_duration_share,
    generate_corpus,
    global_mvn,
    load_corpus,
    read_features,
    save_corpus,
    subsampled_length,
    write_features,
)
from csasr.vocab import derive_ld_labels

SMALL = CorpusConfig(n_train=120, n_valid=20, n_test=100, seed=5)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(SMALL)


def _same(c1: Corpus, c2: Corpus) -> bool:
    for split in c1.splits:
        for u, v in zip(c1[split], c2[split], strict=True):
            if u.uid != v.uid or u.tokens != v.tokens or u.features.tobytes() != v.features.tobytes():
                return False
    return True


def test_deterministic(corpus):
    assert _same(corpus, generate_corpus(SMALL))
    assert not _same(corpus, generate_corpus(dataclasses.replace(SMALL, seed=6)))


def test_split_sizes_and_disjoint_ids(corpus):
    sizes = {k: len(v) for k, v in corpus.splits.items()}
    assert sizes == {"train": 120, "valid": 20, "test_cs": 100, "test_mono": 100}
    ids = [u.uid for utts in corpus.splits.values() for u in utts]
    assert len(ids) == len(set(ids))


def test_utterance_invariants(corpus):
    for utts in corpus.splits.values():
        for u in utts:
            n = len(u.target)
            assert u.n_frames >= 2 * n + 1
            assert subsampled_length(u.n_frames, 4) >= n
            assert u.ld_labels == derive_ld_labels(u.tokens, corpus.vocab)
            assert u.tokens[0] == u.tokens[-1] == corpus.vocab.sos_eos
            assert 0.0 <= u.language_ratio <= 1.0
            assert u.features.shape[1] == SMALL.feature_dim


def test_test_split_composition(corpus):
    assert cs_duration_share(corpus["test_cs"]) >= 0.70
    mono = corpus["test_mono"]
    total = sum(u.n_frames for u in mono)
    assert sum(u.n_frames for u in mono if not u.is_cs) / total >= 0.40


def test_no_switching_means_monolingual():
    c = generate_corpus(dataclasses.replace(SMALL, switch_prob=0.0, n_train=200))
    for utts in c.splits.values():
        for u in utts:
            assert u.language_ratio in (0.0, 1.0)
            assert not u.is_cs


def test_switch_prob_half_two_word_cs_fraction():
    cfg = dataclasses.replace(
        SMALL, switch_prob=0.5, min_words=2, max_words=2, n_train=1000, n_valid=0, n_test=0
    )
    cs = np.mean([u.is_cs for u in generate_corpus(cfg)["train"]])
    assert 0.4 <= cs <= 0.6


def test_switch_prob_half_matches_switching_process():
    # P(CS | k words) = 1 - 0.5**(k-1); k is uniform on {min_words..max_words}
    cfg = dataclasses.replace(SMALL, switch_prob=0.5, n_train=1000, n_valid=0, n_test=0)
    cs = np.mean([u.is_cs for u in generate_corpus(cfg)["train"]])
    expected = np.mean([1 - 0.5 ** (k - 1) for k in range(cfg.min_words, cfg.max_words + 1)])
    assert abs(cs - expected) < 0.04


def test_invalid_configs():
    for bad in (dict(switch_prob=1.5), dict(feature_dim=0), dict(frames_per_unit_jitter=8), dict(min_words=0)):
        with pytest.raises(CorpusError):
            generate_corpus(dataclasses.replace(SMALL, **bad))


def test_mvn_statistics(corpus):
    normed, stats = global_mvn(corpus)
    x = np.concatenate([u.features for u in normed["train"]])
    assert np.abs(x.mean(axis=0)).max() < 1e-9
    assert np.abs(x.var(axis=0) - 1).max() < 1e-6
    # test splits use the training statistics
    raw = corpus["test_cs"][0].features
    np.testing.assert_allclose(normed["test_cs"][0].features, (raw - stats.mean) / np.sqrt(stats.var))


def test_mvn_idempotent(corpus):
    once, _ = global_mvn(corpus)
    twice, _ = global_mvn(once)
    for u, v in zip(once["valid"], twice["valid"]):
        np.testing.assert_allclose(u.features, v.features, atol=1e-6)


def test_mvn_constant_dimension(corpus, caplog):
    train = [dataclasses.replace(u, features=u.features.copy()) for u in corpus["train"]]
    for u in train:
        u.features[:, 3] = 7.0
    c = Corpus(corpus.config, corpus.vocab, {"train": train})
    with caplog.at_level(logging.WARNING):
        normed, stats = global_mvn(c)
    assert stats.var[3] == 1e-8
    assert all(np.all(u.features[:, 3] == 0.0) for u in normed["train"])
    assert "floored" in caplog.text


def test_mvn_needs_training_data(corpus):
    with pytest.raises(CorpusError):
        global_mvn(Corpus(corpus.config, corpus.vocab, {"train": []}))


def test_disk_round_trip(tmp_path, corpus):
    normed, _ = global_mvn(corpus)
    save_corpus(normed, tmp_path / "c")
    back = load_corpus(tmp_path / "c")
    assert _same(normed, back)
    assert back.vocab == normed.vocab
    np.testing.assert_array_equal(back.mvn.mean, normed.mvn.mean)
    first = (tmp_path / "c" / "manifest.jsonl").read_text(encoding="utf-8").splitlines()[0]
    assert '"split": "train"' in first and '"frames"' in first


def test_feature_file_format(tmp_path):
    x = np.arange(12.0).reshape(3, 4)
    write_features(tmp_path / "f.bin", x)
    raw = (tmp_path / "f.bin").read_bytes()
    assert raw[:8] == (3).to_bytes(4, "little") + (4).to_bytes(4, "little")
    assert len(raw) == 8 + 12 * 8
    np.testing.assert_array_equal(read_features(tmp_path / "f.bin"), x)


def test_missing_corpus(tmp_path):
    with pytest.raises(CorpusError):
        load_corpus(tmp_path / "nothing")


def test_unknown_split(corpus):
    with pytest.raises(CorpusError):
        corpus["dev"]


def test_cs_test_utterances_with_single_word_configs():
    from csasr.corpus import CorpusConfig, generate_corpus

    corpus = generate_corpus(CorpusConfig(min_words=1, max_words=1, n_train=4, n_valid=2, n_test=10))
    assert sum(u.is_cs for u in corpus["test_cs"]) == 8
