"""Corpus BLEU and exact match."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence


class LengthMismatch(ValueError):
    pass


class EmptyCorpus(ValueError):
    pass


@dataclass
class EvalReport:
    bleu: float
    exact_match: float
    n_samples: int
    per_ngram_precisions: list[float]
    brevity_penalty: float

    def to_dict(self) -> dict:
        return asdict(self)


def _words(x) -> list[str]:
    return x.split() if isinstance(x, str) else list(x)


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _check(candidates, references):
    if len(candidates) != len(references):
        raise LengthMismatch(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise EmptyCorpus("nothing to score")


def corpus_bleu(
    candidates: Sequence[str | Sequence[str]],
    references: Sequence[str | Sequence[str]],
    max_n: int = 4,
    smoothing: bool = False,
) -> EvalReport:
    """Single-reference corpus BLEU on a 0-100 scale.

    Clipped n-gram matches and totals are summed over the whole corpus before
    the geometric mean. Strings are split on whitespace. Without smoothing a
    zero precision gives BLEU 0; with ``smoothing`` one is added to the match
    and total counts of every order above 1. Orders for which the corpus has
    no candidate n-grams at all (every candidate shorter than n) are left out
    of the mean.
    """
    _check(candidates, references)
    cands = [_words(c) for c in candidates]
    refs = [_words(r) for r in references]
    matches = [0] * max_n
    totals = [0] * max_n
    c_len = r_len = 0
    exact = 0
    for c, r in zip(cands, refs):
        c_len += len(c)
        r_len += len(r)
        exact += c == r
        for n in range(1, max_n + 1):
            cn, rn = _ngrams(c, n), _ngrams(r, n)
            matches[n - 1] += sum(min(k, rn[g]) for g, k in cn.items())
            totals[n - 1] += max(len(c) - n + 1, 0)
    precisions = []
    logs = []
    for n in range(max_n):
        m, t = matches[n], totals[n]
        if smoothing and n > 0:
            m, t = m + 1, t + 1
        p = m / t if t else 0.0
        precisions.append(100.0 * p)
        if t:
            logs.append(math.log(p) if p > 0 else -math.inf)
    if c_len == 0:
        bp = 0.0
    elif c_len < r_len:
        bp = math.exp(1 - r_len / c_len)
    else:
        bp = 1.0
    if not logs or -math.inf in logs:
        bleu = 0.0
    else:
        bleu = 100.0 * bp * math.exp(sum(logs) / len(logs))
    return EvalReport(
        bleu=bleu,
        exact_match=exact / len(cands),
        n_samples=len(cands),
        per_ngram_precisions=precisions,
        brevity_penalty=bp,
    )


def exact_match(candidates: Sequence[str], references: Sequence[str], normalize: bool = True) -> float:
    """Fraction of identical pairs; ``normalize`` collapses whitespace first."""
    if len(candidates) != len(references):
        raise LengthMismatch(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        return 0.0
    norm = (lambda s: " ".join(s.split())) if normalize else (lambda s: s)
    return sum(norm(c) == norm(r) for c, r in zip(candidates, references)) / len(candidates)


def evaluate(
    candidates: Sequence[str], references: Sequence[str], smoothing: bool = False, normalize: bool = True
) -> EvalReport:
    """BLEU over whitespace tokens plus string exact match."""
    report = corpus_bleu(candidates, references, smoothing=smoothing)
    report.exact_match = exact_match(candidates, references, normalize)
    return report
