"""Sentence-level BLEU-1..4, averaged over a set of pairs."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

from .errors import ContractError

SMOOTH_EPS = 1e-9


def ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def clipped_precision(hyp: Sequence, refs: Sequence[Sequence], n: int) -> tuple[int, int]:
    counts = ngrams(hyp, n)
    max_ref: Counter = Counter()
    for ref in refs:
        for g, c in ngrams(ref, n).items():
            max_ref[g] = max(max_ref[g], c)
    matched = sum(min(c, max_ref[g]) for g, c in counts.items())
    return matched, sum(counts.values())


def brevity_penalty(hyp_len: int, refs: Sequence[Sequence]) -> float:
    # closest reference length, shorter one on ties
    r = min((len(ref) for ref in refs), key=lambda L: (abs(L - hyp_len), L))
    return math.exp(min(0.0, 1.0 - r / hyp_len))


def bleu_n(hyp: Sequence, refs: Sequence[Sequence], n: int = 4, cumulative: bool = True) -> float:
    """Cumulative BLEU-n with uniform weights and closest-length brevity penalty.

    A hypothesis shorter than n tokens is scored on orders 1..len(hyp).  Zero
    precisions at order >= 2 are replaced by 1e-9 when unigram precision is
    positive.  ``cumulative=False`` scores the n-gram order alone.
    """
    if n not in (1, 2, 3, 4):
        raise ContractError("n must be in 1..4")
    if not refs:
        raise ContractError("at least one reference is required")
    hyp = list(hyp)
    if not hyp:
        return 0.0
    orders = list(range(1, min(n, len(hyp)) + 1)) if cumulative else [n]
    if not cumulative and len(hyp) < n:
        return 0.0
    precisions = []
    for k in orders:
        m, total = clipped_precision(hyp, refs, k)
        precisions.append(m / total)
    if precisions[0] == 0:
        return 0.0
    precisions = [p if p > 0 else SMOOTH_EPS for p in precisions]
    log_mean = math.fsum(math.log(p) for p in precisions) / len(precisions)
    return brevity_penalty(len(hyp), refs) * math.exp(log_mean)


@dataclass
class BleuReport:
    b1: float
    b2: float
    b3: float
    b4: float
    per_sample: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"b1": self.b1, "b2": self.b2, "b3": self.b3, "b4": self.b4}


def corpus_eval(pairs: Sequence[tuple], n_max: int = 4) -> BleuReport:
    """Mean of per-pair sentence BLEU-n for n = 1..n_max (remaining orders report 0)."""
    if not pairs:
        raise ContractError("no pairs to score")
    per = []
    for hyp, ref in pairs:
        per.append([bleu_n(hyp, [ref], n) for n in range(1, n_max + 1)])
    means = [math.fsum(row[i] for row in per) / len(per) for i in range(n_max)]
    means += [0.0] * (4 - n_max)
    return BleuReport(*means, per_sample=per)
