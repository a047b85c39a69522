"""Caption-consensus scoring (tf-idf n-gram cosine) and the margins it drives.

The score of a candidate caption against a reference set is the mean, over
n-gram orders 1..4, of the average cosine between tf-idf weighted n-gram
vectors, scaled by 10.  Document frequencies are counted per image: an image
contributes 1 to the frequency of a gram if any of its reference captions
contains it.  The relevance gap between a positive caption and a negative one
is turned into a per-anchor ranking margin by dividing by a temperature and
clamping to a nonnegative range.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

Tokens = Sequence[str]

NGRAM_ORDERS = (1, 2, 3, 4)

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation.  No stemming."""
    return _TOKEN_RE.findall(text.lower())


def ngram_counts(tokens: Tokens, order: int) -> Counter:
    return Counter(tuple(tokens[i : i + order]) for i in range(len(tokens) - order + 1))


@dataclass
class IdfTable:
    """Per-order document frequencies over a reference corpus.

    ``corpus_size`` is the number of images (reference sets).  Grams unseen
    at query time are treated as having document frequency 1.
    """

    doc_freq: Mapping[int, Mapping[tuple, int]]
    corpus_size: int

    def idf(self, gram: tuple) -> float:
        df = self.doc_freq.get(len(gram), {}).get(gram, 1)
        return math.log(self.corpus_size / df)


def build_idf(reference_corpus: Sequence[Sequence[Tokens]], orders: Sequence[int] = NGRAM_ORDERS) -> IdfTable:
    """Count, per n-gram order, how many images mention each gram.

    ``reference_corpus`` is one caption set (list of token lists) per image.
    """
    if not reference_corpus:
        raise ValueError("reference corpus is empty")
    doc_freq: dict[int, dict[tuple, int]] = {n: {} for n in orders}
    for caption_set in reference_corpus:
        for n in orders:
            seen: set[tuple] = set()
            for caption in caption_set:
                seen.update(ngram_counts(caption, n))
            table = doc_freq[n]
            for gram in seen:
                table[gram] = table.get(gram, 0) + 1
    return IdfTable(doc_freq=doc_freq, corpus_size=len(reference_corpus))


@dataclass
class CiderScore:
    value: float
    per_n: tuple[float, ...]


def _tfidf_vector(tokens: Tokens, order: int, idf: IdfTable) -> dict[tuple, float]:
    counts = ngram_counts(tokens, order)
    return {gram: count * idf.idf(gram) for gram, count in counts.items()}


def _cosine(a: dict, b: dict) -> float:
    norm_a = math.sqrt(sum(w * w for w in a.values()))
    norm_b = math.sqrt(sum(w * w for w in b.values()))
    if norm_a == 0.0 or norm_b == 0.0:
        return 0.0
    if a == b:
        # identical vectors score exactly 1, immune to sqrt rounding
        return 1.0
    dot = sum(w * b[g] for g, w in a.items() if g in b)
    return dot / (norm_a * norm_b)


def cider_score(
    candidate: Tokens,
    references: Sequence[Tokens],
    idf: IdfTable,
    orders: Sequence[int] = NGRAM_ORDERS,
) -> CiderScore:
    """Score a candidate caption against a reference set.

    Orders longer than either caption contribute cosine 0 (their tf-idf
    vector is empty).
    """
    if not candidate:
        raise ValueError("candidate caption is empty")
    if not references:
        raise ValueError("no reference captions to score against")
    per_n = []
    for n in orders:
        cand_vec = _tfidf_vector(candidate, n, idf)
        sims = [_cosine(cand_vec, _tfidf_vector(ref, n, idf)) for ref in references]
        per_n.append(sum(sims) / len(references))
    return CiderScore(value=10.0 * sum(per_n) / len(per_n), per_n=tuple(per_n))


@dataclass
class AdaptiveMargins:
    """Per-anchor ranking margins derived from caption relevance gaps."""

    delta_v: float
    delta_t: float
    beta: float


def relevance(gt_set: Sequence[Tokens], caption: Tokens, idf: IdfTable) -> float:
    """Consensus score of a caption against a ground-truth set, leave-one-out.

    Any reference identical to the caption is dropped so a caption never
    serves as its own reference.
    """
    refs = [ref for ref in gt_set if list(ref) != list(caption)]
    if not refs:
        raise ValueError("no references remain after leave-one-out")
    return cider_score(caption, refs, idf).value


def adaptive_margins(
    gt_set: Sequence[Tokens],
    positive: Tokens,
    neg_caption: Tokens,
    neg_partner_caption: Tokens,
    idf: IdfTable,
    beta: float,
    delta_max: float = 1.0,
) -> AdaptiveMargins:
    """Margins from the relevance gap of the positive over each negative.

    The gap is divided by ``beta`` and clamped to [0, delta_max]; a negative
    that explains the image better than the positive yields margin 0 rather
    than a sign flip.
    """
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    phi_pos = relevance(gt_set, positive, idf)
    phi_neg = relevance(gt_set, neg_caption, idf)
    phi_partner = relevance(gt_set, neg_partner_caption, idf)
    delta_v = min(max((phi_pos - phi_neg) / beta, 0.0), delta_max)
    delta_t = min(max((phi_pos - phi_partner) / beta, 0.0), delta_max)
    return AdaptiveMargins(delta_v=delta_v, delta_t=delta_t, beta=beta)
