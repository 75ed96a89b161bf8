"""Mixed error rate: words for language A, characters for language B."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

from .vocab import A_SUBWORD, B_CHAR, LD_SOS_EOS, WORD_START, Vocab

E, M, OTHER = "e", "m", "other"


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MixedUnitSequence:
    units: Tuple[Tuple[str, str], ...]

    def __len__(self) -> int:
        return len(self.units)

    def strings(self) -> List[str]:
        return [u for u, _ in self.units]

    def text(self) -> str:
        """Language-A words separated by spaces, language-B characters joined,
        a space at every language boundary."""
        out = []
        prev = None
        for unit, tag in self.units:
            if out and not (tag == M and prev == M):
                out.append(" ")
            out.append(unit)
            prev = tag
        return "".join(out)

    @classmethod
    def from_text(cls, text: str) -> "MixedUnitSequence":
        units = []
        for chunk in text.split():
            if all(_is_cjk(ch) for ch in chunk):
                units.extend((ch, M) for ch in chunk)
            else:
                units.append((chunk, E))
        return cls(tuple(units))


def _is_cjk(ch: str) -> bool:
    return 0x3400 <= ord(ch) <= 0x9FFF


def to_mixed_units(tokens: Sequence[str], vocab: Vocab) -> MixedUnitSequence:
    """Merge language-A subwords into words and split language-B tokens into
    characters; special tokens are dropped."""
    units: List[List[str]] = []
    open_word = False
    for tok in tokens:
        idx = vocab.id_of(tok)
        cls = vocab.class_of(idx) if vocab.tokens[idx] == tok else None
        if cls == A_SUBWORD:
            piece = tok[len(WORD_START):] if tok.startswith(WORD_START) else tok
            if tok.startswith(WORD_START) or not open_word:
                units.append([piece, E])
            else:
                units[-1][0] += piece
            open_word = True
        elif cls == B_CHAR:
            units.extend([ch, M] for ch in tok)
            open_word = False
    return MixedUnitSequence(tuple((u, t) for u, t in units))


@dataclass
class EditResult:
    substitutions: int
    deletions: int
    insertions: int
    alignment: List[Tuple[str, object, object]] = field(default_factory=list)

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    def counts(self) -> Tuple[int, int, int]:
        return self.substitutions, self.deletions, self.insertions


def edit_distance(ref: Sequence, hyp: Sequence) -> EditResult:
    """Levenshtein alignment of unit sequences.

    Ties on the backtrace prefer match/substitution, then deletion, then
    insertion. Units compare by string only, so a substitution may cross
    languages.
    """
    r = ref.units if isinstance(ref, MixedUnitSequence) else tuple(ref)
    h = hyp.units if isinstance(hyp, MixedUnitSequence) else tuple(hyp)
    rs = [u[0] if isinstance(u, tuple) else u for u in r]
    hs = [u[0] if isinstance(u, tuple) else u for u in h]
    n, m = len(rs), len(hs)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        d[i][0] = i
    for j in range(1, m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = d[i - 1][j - 1] + (rs[i - 1] != hs[j - 1])
            d[i][j] = min(sub, d[i - 1][j] + 1, d[i][j - 1] + 1)

    i, j = n, m
    s = dl = ins = 0
    align = []
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (rs[i - 1] != hs[j - 1]):
            op = "match" if rs[i - 1] == hs[j - 1] else "sub"
            s += op == "sub"
            align.append((op, r[i - 1], h[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            dl += 1
            align.append(("del", r[i - 1], None))
            i -= 1
        else:
            ins += 1
            align.append(("ins", None, h[j - 1]))
            j -= 1
    align.reverse()
    return EditResult(s, dl, ins, align)


def _tag(unit) -> str:
    return unit[1] if isinstance(unit, tuple) else OTHER


def score(refs: Sequence[MixedUnitSequence], hyps: Sequence[MixedUnitSequence]) -> Dict:
    """Corpus-pooled MER with per-language S/D/I counts.

    Substitutions and deletions are charged to the reference unit's language,
    insertions to the hypothesis unit's language.
    """
    if len(refs) != len(hyps):
        raise MetricError(f"{len(refs)} references vs {len(hyps)} hypotheses")
    n_ref = sum(len(r) for r in refs)
    if n_ref == 0:
        raise MetricError("empty reference corpus")
    per_lang = {tag: {"sub": 0, "del": 0, "ins": 0, "ref_units": 0} for tag in (E, M, OTHER)}
    total = 0
    for ref, hyp in zip(refs, hyps):
        res = edit_distance(ref, hyp)
        total += res.errors
        for unit in ref.units:
            per_lang[_tag(unit)]["ref_units"] += 1
        for op, ru, hu in res.alignment:
            if op in ("sub", "del"):
                per_lang[_tag(ru)][op] += 1
            elif op == "ins":
                per_lang[_tag(hu)]["ins"] += 1
    return {
        "mer": 100.0 * total / n_ref,
        "errors": total,
        "ref_units": n_ref,
        "per_language": per_lang,
    }


def mer(refs: Sequence[MixedUnitSequence], hyps: Sequence[MixedUnitSequence]) -> float:
    """100 * sum(S + D + I) / sum(|ref|) over the corpus."""
    return score(refs, hyps)["mer"]


def ld_accuracy(ref_labels: Sequence[Sequence[int]], pred_labels: Sequence[Sequence[int]]) -> float:
    """Percentage of matching LD labels, ignoring reference sos/eos positions."""
    if len(ref_labels) != len(pred_labels):
        raise MetricError("different numbers of utterances")
    hit = tot = 0
    for ref, pred in zip(ref_labels, pred_labels):
        if len(ref) != len(pred):
            raise MetricError(f"label length mismatch: {len(ref)} vs {len(pred)}")
        for a, b in zip(ref, pred):
            if a == LD_SOS_EOS:
                continue
            tot += 1
            hit += a == b
    if tot == 0:
        raise MetricError("no scorable LD positions")
    return 100.0 * hit / tot
