"""Token inventory and token-level language-diarization labels."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Union

logger = logging.getLogger(__name__)

BLANK = "<blank>"
UNK = "<unk>"
NOISE = "<noise>"
SOS_EOS = "<sos/eos>"
SPECIALS = (BLANK, UNK, NOISE, SOS_EOS)

# token classes
A_SUBWORD = "a_subword"
B_CHAR = "b_char"
SPECIAL = "special"
CLASSES = (A_SUBWORD, B_CHAR, SPECIAL)

# word-start marker for language-A subwords
WORD_START = "▁"

# language-diarization label inventory
LD_E, LD_M, LD_SOS_EOS, LD_OTHER = 0, 1, 2, 3
LD_LABELS = ("e", "m", "sos/eos", "other")
LD_SIZE = len(LD_LABELS)


class VocabError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    tokens: tuple
    classes: tuple

    def __post_init__(self):
        if len(self.tokens) != len(self.classes):
            raise VocabError("tokens and classes differ in length")
        if len(set(self.tokens)) != len(self.tokens):
            raise VocabError("duplicate token")
        for tok in SPECIALS:
            if tok not in self.tokens:
                raise VocabError(f"missing special token {tok}")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def blank(self) -> int:
        return self._index[BLANK]

    @property
    def unk(self) -> int:
        return self._index[UNK]

    @property
    def noise(self) -> int:
        return self._index[NOISE]

    @property
    def sos_eos(self) -> int:
        return self._index[SOS_EOS]

    def id_of(self, token: str) -> int:
        return self._index.get(token, self.unk)

    def class_of(self, idx: int) -> str:
        return self.classes[idx]

    def ids_of_class(self, cls: str) -> List[int]:
        return [i for i, c in enumerate(self.classes) if c == cls]

    def save(self, path: Union[str, Path]) -> None:
        lines = [f"{t}\t{c}" for t, c in zip(self.tokens, self.classes)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocab":
        tokens, classes = [], []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line:
                continue
            tok, c = line.split("\t")
            if c not in CLASSES:
                raise VocabError(f"unknown token class {c!r}")
            tokens.append(tok)
            classes.append(c)
        return cls(tuple(tokens), tuple(classes))


def build_vocab(a_units: Iterable[str], b_units: Iterable[str]) -> Vocab:
    """Specials first (blank has id 0), then sorted language-A subwords, then
    sorted language-B characters."""
    a_units, b_units = list(a_units), list(b_units)
    seen = set(SPECIALS)
    for u in a_units + b_units:
        if u in seen:
            raise VocabError(f"duplicate token {u!r}")
        seen.add(u)
    if not a_units and not b_units:
        logger.warning("building a vocabulary with special tokens only")
    tokens = list(SPECIALS) + sorted(a_units) + sorted(b_units)
    classes = [SPECIAL] * len(SPECIALS) + [A_SUBWORD] * len(a_units) + [B_CHAR] * len(b_units)
    return Vocab(tuple(tokens), tuple(classes))


def full_scale_units(n_english: int = 3000, n_mandarin: int = 2624):
    """Placeholder unit inventories at full-size recipe sizes."""
    a = [f"{WORD_START}e{i:04d}" for i in range(n_english)]
    b = [chr(0x4E00 + i) for i in range(n_mandarin)]
    return a, b


def _class_label(cls: str, token: str) -> int:
    if cls == A_SUBWORD:
        return LD_E
    if cls == B_CHAR:
        return LD_M
    if token == SOS_EOS:
        return LD_SOS_EOS
    return LD_OTHER


def ld_label_table(vocab: Vocab) -> List[int]:
    """LD label for every token id."""
    return [_class_label(c, t) for t, c in zip(vocab.tokens, vocab.classes)]


def derive_ld_labels(tokens: Sequence[int], vocab: Vocab) -> List[int]:
    table = ld_label_table(vocab)
    out = []
    for t in tokens:
        t = int(t)
        if not 0 <= t < len(vocab):
            raise VocabError(f"token id {t} outside [0, {len(vocab)})")
        out.append(table[t])
    return out


def encode_text(units: Sequence[str], vocab: Vocab) -> List[int]:
    return [vocab.id_of(u) for u in units]


def decode_ids(ids: Sequence[int], vocab: Vocab) -> List[str]:
    return [vocab.tokens[int(i)] for i in ids]


def class_counts(vocab: Vocab) -> Dict[str, int]:
    return {c: sum(1 for x in vocab.classes if x == c) for c in CLASSES}
