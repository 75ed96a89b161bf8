"""Synthetic bilingual code-switching corpus.

Each token emits its unit template for a jittered number of frames, plus
per-frame Gaussian noise and a per-utterance speaker offset. Unit ``i`` of
language A and unit ``i`` of language B share a base template and differ only
by a language offset and a small unit-private deviation, so cross-language
confusion is built in and language context helps disambiguate.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .vocab import (
    WORD_START,
    Vocab,
    build_vocab,
    decode_ids,
    derive_ld_labels,
    encode_text,
)

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test_cs", "test_mono")

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


class CorpusError(ValueError):
    pass


@dataclass
class CorpusConfig:
    n_units_per_language: int = 20
    frames_per_unit_mean: int = 8
    frames_per_unit_jitter: int = 2
    feature_dim: int = 16
    switch_prob: float = 0.3
    min_words: int = 2
    max_words: int = 6
    n_train: int = 2000
    n_valid: int = 200
    n_test: int = 200
    # (mono-A, mono-B, CS) utterance shares of the two test splits
    test_cs_mix: Tuple[float, float, float] = (0.07, 0.14, 0.79)
    test_mono_mix: Tuple[float, float, float] = (0.41, 0.06, 0.53)
    noise_std: float = 0.8
    speaker_std: float = 0.5
    lang_separation: float = 0.6
    unit_private_std: float = 0.5
    noise_token_prob: float = 0.05
    subsample_factor: int = 4
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.switch_prob <= 1.0:
            raise CorpusError(f"switch_prob must be in [0, 1], got {self.switch_prob}")
        if self.feature_dim < 1:
            raise CorpusError("feature_dim must be >= 1")
        if not 0 <= self.frames_per_unit_jitter < self.frames_per_unit_mean:
            raise CorpusError("frames_per_unit_jitter must be in [0, frames_per_unit_mean)")
        if self.n_units_per_language < 0:
            raise CorpusError("n_units_per_language must be >= 0")
        if not 1 <= self.min_words <= self.max_words:
            raise CorpusError("need 1 <= min_words <= max_words")
        for name in ("test_cs_mix", "test_mono_mix"):
            mix = getattr(self, name)
            if len(mix) != 3 or min(mix) < 0 or abs(sum(mix) - 1.0) > 1e-9:
                raise CorpusError(f"{name} must be three non-negative shares summing to 1")
        if min(self.n_train, self.n_valid, self.n_test) < 0:
            raise CorpusError("split sizes must be non-negative")

    @classmethod
    def from_dict(cls, d: Dict) -> "CorpusConfig":
        d = dict(d)
        for k in ("test_cs_mix", "test_mono_mix"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def units(self) -> Tuple[List[str], List[str]]:
        """Language-A subword inventory and language-B character inventory.

        The first half of the A inventory are word-initial subwords (prefixed
        with the word-start marker), the rest are word-continuation subwords.
        """
        n = self.n_units_per_language
        syllables = [c + v for c in _CONSONANTS for v in _VOWELS]
        if n > len(syllables):
            syllables += [f"x{i}" for i in range(n - len(syllables))]
        n_init = (n + 1) // 2
        a = [WORD_START + s for s in syllables[:n_init]] + syllables[n_init:n]
        b = [chr(0x4E00 + 37 * i) for i in range(n)]
        return a, b


@dataclass
class Utterance:
    uid: str
    split: str
    features: np.ndarray
    tokens: List[int]
    ld_labels: List[int]
    language_ratio: float
    is_cs: bool

    @property
    def n_frames(self) -> int:
        return int(self.features.shape[0])

    @property
    def target(self) -> List[int]:
        """Token ids without the surrounding sos/eos."""
        return self.tokens[1:-1]


@dataclass
class MVNStats:
    mean: np.ndarray
    var: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / np.sqrt(self.var)

    def to_dict(self) -> Dict:
        return {"mean": self.mean.tolist(), "var": self.var.tolist()}

    @classmethod
    def from_dict(cls, d: Dict) -> "MVNStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["var"], dtype=np.float64))


@dataclass
class Corpus:
    config: CorpusConfig
    vocab: Vocab
    splits: Dict[str, List[Utterance]] = field(default_factory=dict)
    mvn: Optional[MVNStats] = None

    def __getitem__(self, split: str) -> List[Utterance]:
        try:
            return self.splits[split]
        except KeyError:
            raise CorpusError(f"missing split {split!r}") from None


def ctc_min_frames(target: Sequence[int]) -> int:
    """Fewest frames admitting a CTC alignment: one per label plus a blank
    between adjacent repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def subsampled_length(t: int, factor: int) -> int:
    """Ceil-division chain of stride-2 stages."""
    while factor > 1:
        t = -(-t // 2)
        factor //= 2
    return t


class _Templates:
    def __init__(self, cfg: CorpusConfig, rng: np.random.Generator):
        n, f = cfg.n_units_per_language, cfg.feature_dim
        base = rng.standard_normal((n, f))
        lang = rng.standard_normal((2, f))
        lang *= cfg.lang_separation / np.maximum(np.linalg.norm(lang, axis=1, keepdims=True), 1e-12)
        lang *= np.sqrt(f)
        private = cfg.unit_private_std * rng.standard_normal((2, n, f))
        self.a = base + lang[0] + private[0]
        self.b = base + lang[1] + private[1]
        self.noise = rng.standard_normal(f) * 1.5


def _sample_word(lang: int, n_init: int, n_units: int, rng: np.random.Generator) -> List[Tuple[int, int]]:
    """(language, unit index) pairs of one word; 1-2 units."""
    length = 1 + int(rng.random() < 0.5)
    if lang == 0:
        if n_init == 0:
            return []
        units = [int(rng.integers(n_init))]
        if length == 2 and n_units > n_init:
            units.append(int(rng.integers(n_init, n_units)))
        return [(0, u) for u in units]
    if n_units == 0:
        return []
    return [(1, int(rng.integers(n_units))) for _ in range(length)]


def _word_languages(n_words: int, kind: str, switch_prob: float, rng: np.random.Generator) -> List[int]:
    """kind: 'free' (switching process), 'mono_a', 'mono_b', or 'cs' (at least one switch)."""
    if kind == "mono_a":
        return [0] * n_words
    if kind == "mono_b":
        return [1] * n_words
    while True:
        langs = [int(rng.random() < 0.5)]
        for _ in range(n_words - 1):
            cur = langs[-1]
            langs.append(1 - cur if rng.random() < switch_prob else cur)
        if kind == "free" or len(set(langs)) > 1:
            return langs


def _make_utterance(
    uid: str,
    split: str,
    kind: str,
    cfg: CorpusConfig,
    templates: _Templates,
    vocab: Vocab,
    a_units: List[str],
    b_units: List[str],
    rng: np.random.Generator,
) -> Utterance:
    n = cfg.n_units_per_language
    n_init = (n + 1) // 2
    n_words = int(rng.integers(cfg.min_words, cfg.max_words + 1))
    if kind == "cs":
        n_words = max(n_words, 2)  # a switch needs two words
    langs = _word_languages(n_words, kind, cfg.switch_prob, rng)
    words = [w for w in (_sample_word(lang, n_init, n, rng) for lang in langs) if w]
    if words and rng.random() < cfg.noise_token_prob:
        # noise tokens only at word boundaries
        words.insert(int(rng.integers(len(words) + 1)), [(2, 0)])
    units = [u for w in words for u in w]

    strings = []
    for lang, u in units:
        strings.append(a_units[u] if lang == 0 else b_units[u] if lang == 1 else "<noise>")
    ids = encode_text(strings, vocab)

    lo = cfg.frames_per_unit_mean - cfg.frames_per_unit_jitter
    hi = cfg.frames_per_unit_mean + cfg.frames_per_unit_jitter
    speaker = cfg.speaker_std * rng.standard_normal(cfg.feature_dim)
    lead = int(rng.integers(1, 4))
    trail = int(rng.integers(1, 4))
    frames = [np.zeros((lead, cfg.feature_dim))]
    dur = {0: 0, 1: 0}
    for lang, u in units:
        k = int(rng.integers(lo, hi + 1))
        tpl = templates.a[u] if lang == 0 else templates.b[u] if lang == 1 else templates.noise
        frames.append(np.broadcast_to(tpl, (k, cfg.feature_dim)))
        if lang in dur:
            dur[lang] += k
    frames.append(np.zeros((trail, cfg.feature_dim)))
    feats = np.concatenate(frames, axis=0)
    # CTC feasibility on the subsampled time axis
    need = ctc_min_frames(ids)
    while (
        subsampled_length(feats.shape[0], cfg.subsample_factor) < need
        or feats.shape[0] < 2 * len(ids) + 1
    ):
        feats = np.concatenate([feats, np.zeros((1, cfg.feature_dim))], axis=0)
    feats = feats + speaker + cfg.noise_std * rng.standard_normal(feats.shape)

    total = dur[0] + dur[1]
    ratio = dur[0] / total if total else 0.0
    sos = vocab.sos_eos
    tokens = [sos] + ids + [sos]
    return Utterance(
        uid=uid,
        split=split,
        features=feats,
        tokens=tokens,
        ld_labels=derive_ld_labels(tokens, vocab),
        language_ratio=float(ratio),
        is_cs=dur[0] > 0 and dur[1] > 0,
    )


def _kinds_for(split: str, count: int, cfg: CorpusConfig, rng: np.random.Generator) -> List[str]:
    if split in ("train", "valid") or cfg.switch_prob == 0.0:
        return ["free"] * count
    mix = cfg.test_cs_mix if split == "test_cs" else cfg.test_mono_mix
    n_a = int(round(mix[0] * count))
    n_b = int(round(mix[1] * count))
    n_cs = max(count - n_a - n_b, 0)
    kinds = ["mono_a"] * n_a + ["mono_b"] * n_b + ["cs"] * n_cs
    kinds = kinds[:count]
    order = rng.permutation(len(kinds))
    return [kinds[i] for i in order]


def generate_corpus(cfg: CorpusConfig) -> Corpus:
    """Deterministic train/valid/test_cs/test_mono corpus for ``cfg.seed``."""
    cfg.validate()
    a_units, b_units = cfg.units()
    vocab = build_vocab(a_units, b_units)
    root = np.random.SeedSequence(cfg.seed)
    tpl_seed, *split_seeds = root.spawn(1 + len(SPLITS))
    templates = _Templates(cfg, np.random.default_rng(tpl_seed))
    sizes = {"train": cfg.n_train, "valid": cfg.n_valid, "test_cs": cfg.n_test, "test_mono": cfg.n_test}
    corpus = Corpus(config=cfg, vocab=vocab)
    for split, seed in zip(SPLITS, split_seeds):
        rng = np.random.default_rng(seed)
        kinds = _kinds_for(split, sizes[split], cfg, rng)
        corpus.splits[split] = [
            _make_utterance(f"{split}-{i:05d}", split, kind, cfg, templates, vocab, a_units, b_units, rng)
            for i, kind in enumerate(kinds)
        ]
    return corpus


def cs_duration_share(utts: Sequence[Utterance]) -> float:
    total = sum(u.n_frames for u in utts)
    return sum(u.n_frames for u in utts if u.is_cs) / total if total else 0.0


def global_mvn(corpus: Corpus) -> Tuple[Corpus, MVNStats]:
    """Normalise every split with mean/variance estimated on the training split."""
    train = corpus["train"]
    if not train:
        raise CorpusError("global_mvn needs a non-empty training split")
    stacked = np.concatenate([u.features for u in train], axis=0)
    mean = stacked.mean(axis=0)
    var = stacked.var(axis=0)
    low = var < 1e-8
    if low.any():
        logger.warning("floored variance of %d constant feature dimension(s)", int(low.sum()))
        var = np.where(low, 1e-8, var)
    stats = MVNStats(mean, var)
    splits = {
        name: [replace(u, features=stats.apply(u.features)) for u in utts]
        for name, utts in corpus.splits.items()
    }
    return Corpus(config=corpus.config, vocab=corpus.vocab, splits=splits, mvn=stats), stats


# ---------------------------------------------------------------------------
# disk format
# ---------------------------------------------------------------------------

_FEAT_HEADER = struct.Struct("<II")


def write_features(path: Path, feats: np.ndarray) -> None:
    t, f = feats.shape
    with open(path, "wb") as fh:
        fh.write(_FEAT_HEADER.pack(t, f))
        fh.write(np.ascontiguousarray(feats, dtype="<f8").tobytes())


def read_features(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    t, f = _FEAT_HEADER.unpack_from(raw, 0)
    arr = np.frombuffer(raw, dtype="<f8", count=t * f, offset=_FEAT_HEADER.size)
    return arr.astype(np.float64).reshape(t, f)


def save_corpus(corpus: Corpus, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    (directory / "feats").mkdir(parents=True, exist_ok=True)
    corpus.vocab.save(directory / "vocab.txt")
    (directory / "corpus_config.json").write_text(json.dumps(asdict(corpus.config), indent=2))
    if corpus.mvn is not None:
        (directory / "mvn.json").write_text(json.dumps(corpus.mvn.to_dict()))
    with open(directory / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for split in SPLITS:
            for u in corpus.splits.get(split, []):
                write_features(directory / "feats" / f"{u.uid}.bin", u.features)
                rec = {
                    "id": u.uid,
                    "split": split,
                    "tokens": decode_ids(u.tokens, corpus.vocab),
                    "frames": u.n_frames,
                    "language_ratio": u.language_ratio,
                    "is_cs": u.is_cs,
                }
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    return directory


def load_corpus(directory: Union[str, Path]) -> Corpus:
    directory = Path(directory)
    manifest = directory / "manifest.jsonl"
    if not manifest.exists():
        raise CorpusError(f"no corpus manifest at {manifest}")
    vocab = Vocab.load(directory / "vocab.txt")
    cfg = CorpusConfig.from_dict(json.loads((directory / "corpus_config.json").read_text()))
    splits: Dict[str, List[Utterance]] = {s: [] for s in SPLITS}
    with open(manifest, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            feats = read_features(directory / "feats" / f"{rec['id']}.bin")
            if feats.shape[0] != rec["frames"]:
                raise CorpusError(f"{rec['id']}: frame count mismatch")
            tokens = encode_text(rec["tokens"], vocab)
            splits.setdefault(rec["split"], []).append(
                Utterance(
                    uid=rec["id"],
                    split=rec["split"],
                    features=feats,
                    tokens=tokens,
                    ld_labels=derive_ld_labels(tokens, vocab),
                    language_ratio=rec["language_ratio"],
                    is_cs=rec["is_cs"],
                )
            )
    mvn = None
    if (directory / "mvn.json").exists():
        mvn = MVNStats.from_dict(json.loads((directory / "mvn.json").read_text()))
    return Corpus(config=cfg, vocab=vocab, splits=splits, mvn=mvn)
