"""Bidirectional retrieval ranking, recall metrics, and test-time re-ranking.

Every query ranks the complete gallery by inner product, descending, ties
broken by ascending candidate index.  Sentence retrieval can optionally be
re-ranked by fusing the (min-max normalized) similarity with the reciprocal
of the query's rank in the reverse direction; image retrieval is never
re-ranked.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .numerics import as_matrix

I2T = "i2t"
T2I = "t2i"


@dataclass
class RankingResult:
    """Complete gallery ordering per query.

    ``order[q]`` lists candidate indices best-first; ``scores[q]`` holds the
    matching (non-increasing) score values.
    """

    direction: str
    order: np.ndarray
    scores: np.ndarray


def rank_from_scores(score_matrix: np.ndarray, direction: str) -> RankingResult:
    score_matrix = as_matrix(score_matrix, "score matrix")
    if score_matrix.shape[1] == 0:
        raise ValueError("empty gallery")
    n_queries, n_gallery = score_matrix.shape
    # lexsort on (index, -score): stable descending with index tie-break
    cols = np.tile(np.arange(n_gallery), (n_queries, 1))
    order = np.lexsort((cols, -score_matrix), axis=1)
    sorted_scores = np.take_along_axis(score_matrix, order, axis=1)
    return RankingResult(direction=direction, order=order, scores=sorted_scores)


def rank_all(images: np.ndarray, captions: np.ndarray, direction: str) -> RankingResult:
    """Rank the full opposite-modality gallery for every query embedding."""
    images = as_matrix(images, "image embeddings")
    captions = as_matrix(captions, "caption embeddings")
    if images.shape[0] == 0 or captions.shape[0] == 0:
        raise ValueError("empty gallery")
    if direction == I2T:
        return rank_from_scores(images @ captions.T, I2T)
    if direction == T2I:
        return rank_from_scores(captions @ images.T, T2I)
    raise ValueError(f"unknown direction: {direction}")


def recall_at_k(ranking: RankingResult, ground_truth: Mapping[int, set[int] | int], ks: Sequence[int]) -> dict[int, float]:
    """Percentage of queries whose ground truth appears within the top K."""
    n_queries = ranking.order.shape[0]
    hits = {k: 0 for k in ks}
    max_k = max(ks)
    for q in range(n_queries):
        if q not in ground_truth:
            raise ValueError(f"query {q} has no ground truth")
        truth = ground_truth[q]
        matches = truth if isinstance(truth, (set, frozenset)) else {truth}
        top = ranking.order[q, :max_k]
        best = None
        for rank, candidate in enumerate(top):
            if int(candidate) in matches:
                best = rank
                break
        for k in ks:
            if best is not None and best < k:
                hits[k] += 1
    return {k: 100.0 * hits[k] / n_queries for k in ks}


@dataclass
class RecallReport:
    i2t_r1: float
    i2t_r5: float
    i2t_r10: float
    t2i_r1: float
    t2i_r5: float
    t2i_r10: float

    @property
    def r_sum(self) -> float:
        return self.i2t_r1 + self.i2t_r5 + self.i2t_r10 + self.t2i_r1 + self.t2i_r5 + self.t2i_r10

    def rows(self):
        yield "i2t", self.i2t_r1, self.i2t_r5, self.i2t_r10
        yield "t2i", self.t2i_r1, self.t2i_r5, self.t2i_r10


def recall_report(
    ranking_i2t: RankingResult,
    ranking_t2i: RankingResult,
    image_to_captions: Mapping[int, set[int]],
    caption_to_image: Mapping[int, int],
) -> RecallReport:
    i2t = recall_at_k(ranking_i2t, image_to_captions, ks=(1, 5, 10))
    t2i = recall_at_k(ranking_t2i, caption_to_image, ks=(1, 5, 10))
    return RecallReport(
        i2t_r1=i2t[1], i2t_r5=i2t[5], i2t_r10=i2t[10],
        t2i_r1=t2i[1], t2i_r5=t2i[5], t2i_r10=t2i[10],
    )


def hybrid_rerank_i2t(base: RankingResult, reverse: RankingResult, gamma: float) -> RankingResult:
    """Re-rank sentence retrieval by blending similarity with reverse rank.

    For image query v and caption candidate t the new score is
    ``gamma * minmax(sim) + (1 - gamma) / rank_of_v_in_t's_image_ranking``.
    Scores are min-max normalized per query row so gamma is scale-free.
    """
    if base.direction != I2T or reverse.direction != T2I:
        raise ValueError("re-ranking needs an i2t base and a t2i reverse ranking")
    n_images, n_captions = base.order.shape
    if reverse.order.shape != (n_captions, n_images):
        raise ValueError(
            f"inconsistent galleries: base {base.order.shape} vs reverse {reverse.order.shape}"
        )
    if not (0.0 <= gamma <= 1.0):
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")

    # position (1-based) of every image in every caption's ranking
    image_rank = np.empty((n_captions, n_images))
    rows = np.arange(n_captions)[:, None]
    image_rank[rows, reverse.order] = np.arange(1, n_images + 1)

    sims = np.empty((n_images, n_captions))
    img_rows = np.arange(n_images)[:, None]
    sims[img_rows, base.order] = base.scores

    lo = sims.min(axis=1, keepdims=True)
    hi = sims.max(axis=1, keepdims=True)
    spread = hi - lo
    normalized = np.where(spread > 0, (sims - lo) / np.where(spread > 0, spread, 1.0), 0.0)

    fused = gamma * normalized + (1.0 - gamma) / image_rank.T
    return rank_from_scores(fused, I2T)
