"""Corpus BLEU and the evaluation report."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence, Union

from .decoder import tokenize

Sentence = Union[str, Sequence[str]]


def _tokens(s: Sentence) -> list[str]:
    return tokenize(s) if isinstance(s, str) else list(s)


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def modified_precision(candidate: Sentence, references: Sequence[Sentence], n: int) -> tuple[int, int]:
    """Clipped n-gram matches and total candidate n-grams."""
    cand = ngrams(_tokens(candidate), n)
    max_ref: Counter = Counter()
    for ref in references:
        for gram, count in ngrams(_tokens(ref), n).items():
            max_ref[gram] = max(max_ref[gram], count)
    clipped = sum(min(count, max_ref[gram]) for gram, count in cand.items())
    return clipped, sum(cand.values())


def _closest_ref_len(c: int, refs: Sequence[list[str]]) -> int:
    return min((len(r) for r in refs), key=lambda n: (abs(n - c), n))


def bleu(candidates: Sequence[Sentence], references: Sequence[Sequence[Sentence] | Sentence], n: int = 4) -> float:
    """Corpus BLEU-n with brevity penalty.

    ``references[i]`` is one sentence string, or a list of references for
    candidate i (each a string or a token list).
    When any order has zero matches, orders 2..n use add-one smoothing; a
    zero unigram precision always yields 0.
    """
    if not 1 <= n <= 4:
        raise ValueError(f"BLEU order must be in 1..4, got {n}")
    if not candidates or len(candidates) != len(references):
        raise ValueError("need equally many candidates and references, at least one")
    nums = [0] * n
    dens = [0] * n
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        refs = [refs] if isinstance(refs, str) else refs
        ref_toks = [_tokens(r) for r in refs]
        ctoks = _tokens(cand)
        c_len += len(ctoks)
        r_len += _closest_ref_len(len(ctoks), ref_toks)
        for k in range(1, n + 1):
            num, den = modified_precision(ctoks, ref_toks, k)
            nums[k - 1] += num
            dens[k - 1] += den
    if c_len == 0 or nums[0] == 0:
        return 0.0
    smooth = any(x == 0 for x in nums)
    log_p = 0.0
    for k in range(n):
        num, den = nums[k], dens[k]
        if k > 0 and smooth:
            num, den = num + 1, den + 1
        log_p += math.log(num / den) / n
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_p)


@dataclass
class MetricsReport:
    bleu: dict[str, float] = field(default_factory=dict)
    token_accuracy: float = 0.0
    proposal_recall: float = 0.0
    gate_sparsity: float = 1.0
    loss_curve: list[dict[str, float]] = field(default_factory=list)

    @property
    def bleu4(self) -> float:
        return self.bleu.get("bleu_4", 0.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> MetricsReport:
        return cls(**d)
