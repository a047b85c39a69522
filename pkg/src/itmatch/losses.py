"""Ranking losses over a batch of aligned image-caption embeddings.

The batch holds B true pairs; scores are plain inner products.  The base
loss hinges each anchor against its hardest in-batch negative in both
directions.  The hierarchical variant adds, per anchor, a mined hard
caption, a mined hard image, and the ground-truth partners of those mined
items, with separate margins for the in-batch and mined hinges, per-anchor
penalty weights, and (in the adaptive form) per-anchor margins derived from
caption relevance gaps.

Penalty weights and margins are constants for gradient purposes: gradients
route only through the similarity terms of active hinges, then chain into
the embedding rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cider import AdaptiveMargins
from .numerics import as_matrix

FV_TERMS = ("i2t_batch", "i2t_mined", "mined_pair")
FT_TERMS = ("t2i_batch", "t2i_mined", "partner_pair")


@dataclass
class MinedEmbeddings:
    """Per-anchor rows for the mined items (each array is B x d)."""

    hard_caption: np.ndarray
    hard_image: np.ndarray
    partner_caption: np.ndarray
    partner_image: np.ndarray


@dataclass
class BatchSimilarities:
    """Pairwise scores for a batch of aligned pairs plus mined-item scores.

    ``scores[i, j]`` is the inner product of image i with caption j; the
    diagonal holds the positive pairs.  The four auxiliary score vectors
    cover, per anchor: (anchor image, mined caption), (mined image, anchor
    caption), (mined image, mined caption), (partner image, partner caption).
    """

    images: np.ndarray
    captions: np.ndarray
    scores: np.ndarray
    mined: MinedEmbeddings | None = None
    s_anchor_hardcap: np.ndarray | None = None
    s_hardimg_anchor: np.ndarray | None = None
    s_hard_pair: np.ndarray | None = None
    s_partner_pair: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.images.shape[0]

    @classmethod
    def from_embeddings(cls, images, captions, mined: MinedEmbeddings | None = None):
        images = as_matrix(images, "image embeddings")
        captions = as_matrix(captions, "caption embeddings")
        if images.shape != captions.shape:
            raise ValueError(f"batch shapes differ: {images.shape} vs {captions.shape}")
        scores = images @ captions.T
        if mined is None:
            return cls(images=images, captions=captions, scores=scores)
        for name in ("hard_caption", "hard_image", "partner_caption", "partner_image"):
            arr = getattr(mined, name)
            if arr.shape != images.shape:
                raise ValueError(f"mined {name} shape {arr.shape} does not match batch {images.shape}")
        return cls(
            images=images,
            captions=captions,
            scores=scores,
            mined=mined,
            s_anchor_hardcap=np.sum(images * mined.hard_caption, axis=1),
            s_hardimg_anchor=np.sum(mined.hard_image * captions, axis=1),
            s_hard_pair=np.sum(mined.hard_image * mined.hard_caption, axis=1),
            s_partner_pair=np.sum(mined.partner_image * mined.partner_caption, axis=1),
        )


def hardest_negatives(scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of the highest-scoring off-diagonal entry per row and column.

    Ties resolve to the lowest index.  Returns (caption index per image,
    image index per caption).
    """
    b = scores.shape[0]
    if b < 2:
        raise ValueError(f"need at least 2 pairs for in-batch negatives, got {b}")
    masked = scores.copy()
    np.fill_diagonal(masked, -np.inf)
    return np.argmax(masked, axis=1), np.argmax(masked, axis=0)


@dataclass
class PenaltyWeights:
    """Per-anchor loss weights that shrink as mined negatives overtake
    in-batch ones.  Excluded from the gradient."""

    w1: float
    w2: float
    tau: float
    mu: float


def penalty_weights(
    s_anchor_hardcap: float,
    s_anchor_batchneg: float,
    s_hardimg_anchor: float,
    s_batchneg_anchor: float,
    tau: float,
    mu: float,
) -> PenaltyWeights:
    if mu <= 0:
        raise ValueError(f"mu must be positive, got {mu}")
    w1 = tau - (s_anchor_hardcap - s_anchor_batchneg) / mu
    w2 = tau - (s_hardimg_anchor - s_batchneg_anchor) / mu
    clamp = lambda w: min(max(w, 0.0), tau)
    return PenaltyWeights(w1=clamp(w1), w2=clamp(w2), tau=tau, mu=mu)


@dataclass
class LossBreakdown:
    total: float
    per_term: dict[str, np.ndarray]
    delta_v: np.ndarray
    delta_t: np.ndarray
    delta2: float
    weights_1: np.ndarray
    weights_2: np.ndarray
    grads: dict[str, np.ndarray] = field(default_factory=dict)


def _hinge(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def triplet_loss(batch: BatchSimilarities, delta1: float, negatives: str = "hardest") -> LossBreakdown:
    """Bidirectional hinge against in-batch negatives.

    ``negatives="hardest"`` uses the single highest-scoring negative per
    anchor; ``"sum"`` accumulates every violating negative.
    """
    b = batch.size
    if b < 2:
        raise ValueError(f"need at least 2 pairs, got {b}")
    scores = batch.scores
    pos = np.diag(scores)
    d_images = np.zeros_like(batch.images)
    d_captions = np.zeros_like(batch.captions)

    if negatives == "hardest":
        neg_cap, neg_img = hardest_negatives(scores)
        h_i2t = _hinge(delta1 - pos + scores[np.arange(b), neg_cap])
        h_t2i = _hinge(delta1 - pos + scores[neg_img, np.arange(b)])
        for i in range(b):
            if h_i2t[i] > 0:
                d_images[i] += batch.captions[neg_cap[i]] - batch.captions[i]
                d_captions[i] -= batch.images[i]
                d_captions[neg_cap[i]] += batch.images[i]
            if h_t2i[i] > 0:
                d_captions[i] += batch.images[neg_img[i]] - batch.images[i]
                d_images[i] -= batch.captions[i]
                d_images[neg_img[i]] += batch.captions[i]
    elif negatives == "sum":
        off = ~np.eye(b, dtype=bool)
        viol_i2t = _hinge(delta1 - pos[:, None] + scores) * off
        viol_t2i = _hinge(delta1 - pos[None, :] + scores) * off
        h_i2t = viol_i2t.sum(axis=1)
        h_t2i = viol_t2i.sum(axis=0)
        act_i2t = (viol_i2t > 0).astype(float)
        act_t2i = (viol_t2i > 0).astype(float)
        row_act = act_i2t.sum(axis=1)
        col_act = act_t2i.sum(axis=0)
        d_images += act_i2t @ batch.captions - row_act[:, None] * batch.captions
        d_captions += act_i2t.T @ batch.images - row_act[:, None] * batch.images
        d_captions += act_t2i.T @ batch.images - col_act[:, None] * batch.images
        d_images += act_t2i @ batch.captions - col_act[:, None] * batch.captions
    else:
        raise ValueError(f"unknown negative selection: {negatives}")

    total = float(h_i2t.sum() + h_t2i.sum())
    return LossBreakdown(
        total=total,
        per_term={"i2t_batch": h_i2t, "t2i_batch": h_t2i},
        delta_v=np.full(b, delta1),
        delta_t=np.full(b, delta1),
        delta2=0.0,
        weights_1=np.ones(b),
        weights_2=np.ones(b),
        grads={"images": d_images, "captions": d_captions},
    )


def _require_mined(batch: BatchSimilarities):
    if batch.mined is None:
        raise ValueError("batch carries no mined quadruples")


def image_side_hinges(batch: BatchSimilarities, delta_v: np.ndarray, delta2: float) -> np.ndarray:
    """Image-anchored hinge triple per anchor (values only)."""
    _require_mined(batch)
    b = batch.size
    pos = np.diag(batch.scores)
    neg_cap, _ = hardest_negatives(batch.scores)
    h1 = _hinge(np.asarray(delta_v) - pos + batch.scores[np.arange(b), neg_cap])
    h2 = _hinge(delta2 - pos + batch.s_anchor_hardcap)
    h3 = _hinge(delta2 - pos + batch.s_hard_pair)
    return h1 + h2 + h3


def caption_side_hinges(
    batch: BatchSimilarities, delta_t: np.ndarray, delta2: float, pair_term: str = "partners"
) -> np.ndarray:
    """Caption-anchored hinge triple per anchor (values only)."""
    _require_mined(batch)
    b = batch.size
    pos = np.diag(batch.scores)
    _, neg_img = hardest_negatives(batch.scores)
    h1 = _hinge(np.asarray(delta_t) - pos + batch.scores[neg_img, np.arange(b)])
    h2 = _hinge(delta2 - pos + batch.s_hardimg_anchor)
    pair_scores = batch.s_partner_pair if pair_term == "partners" else batch.s_hard_pair
    h3 = _hinge(delta2 - pos + pair_scores)
    return h1 + h2 + h3


def hierarchical_loss_fixed(
    batch: BatchSimilarities,
    delta1: float,
    weights: Sequence[PenaltyWeights],
    delta2: float,
    pair_term: str = "partners",
) -> LossBreakdown:
    """Fixed-margin form: both direction margins pinned to ``delta1``."""
    b = batch.size
    margins = [AdaptiveMargins(delta_v=delta1, delta_t=delta1, beta=1.0) for _ in range(b)]
    return hierarchical_loss(batch, margins, weights, delta2, pair_term=pair_term)


def hierarchical_loss(
    batch: BatchSimilarities,
    margins: Sequence[AdaptiveMargins],
    weights: Sequence[PenaltyWeights],
    delta2: float,
    pair_term: str = "partners",
) -> LossBreakdown:
    """Weighted sum of both hinge triples with full gradient routing."""
    _require_mined(batch)
    b = batch.size
    if len(margins) != b or len(weights) != b:
        raise ValueError(f"need {b} margins and weights, got {len(margins)} and {len(weights)}")
    if pair_term not in ("partners", "mined"):
        raise ValueError(f"unknown pair term mode: {pair_term}")

    scores = batch.scores
    pos = np.diag(scores)
    neg_cap, neg_img = hardest_negatives(scores)
    delta_v = np.array([m.delta_v for m in margins])
    delta_t = np.array([m.delta_t for m in margins])
    w1 = np.array([w.w1 for w in weights])
    w2 = np.array([w.w2 for w in weights])

    idx = np.arange(b)
    h1v = _hinge(delta_v - pos + scores[idx, neg_cap])
    h2v = _hinge(delta2 - pos + batch.s_anchor_hardcap)
    h3v = _hinge(delta2 - pos + batch.s_hard_pair)
    h1t = _hinge(delta_t - pos + scores[neg_img, idx])
    h2t = _hinge(delta2 - pos + batch.s_hardimg_anchor)
    pair_scores = batch.s_partner_pair if pair_term == "partners" else batch.s_hard_pair
    h3t = _hinge(delta2 - pos + pair_scores)

    total = float(np.sum(w1 * (h1v + h2v + h3v) + w2 * (h1t + h2t + h3t)))

    mined = batch.mined
    grads = {
        "images": np.zeros_like(batch.images),
        "captions": np.zeros_like(batch.captions),
        "hard_caption": np.zeros_like(mined.hard_caption),
        "hard_image": np.zeros_like(mined.hard_image),
        "partner_caption": np.zeros_like(mined.partner_caption),
        "partner_image": np.zeros_like(mined.partner_image),
    }
    v, t = batch.images, batch.captions
    for i in range(b):
        if h1v[i] > 0:
            grads["images"][i] += w1[i] * (t[neg_cap[i]] - t[i])
            grads["captions"][i] -= w1[i] * v[i]
            grads["captions"][neg_cap[i]] += w1[i] * v[i]
        if h2v[i] > 0:
            grads["images"][i] += w1[i] * (mined.hard_caption[i] - t[i])
            grads["captions"][i] -= w1[i] * v[i]
            grads["hard_caption"][i] += w1[i] * v[i]
        if h3v[i] > 0:
            grads["images"][i] -= w1[i] * t[i]
            grads["captions"][i] -= w1[i] * v[i]
            grads["hard_image"][i] += w1[i] * mined.hard_caption[i]
            grads["hard_caption"][i] += w1[i] * mined.hard_image[i]
        if h1t[i] > 0:
            grads["captions"][i] += w2[i] * (v[neg_img[i]] - v[i])
            grads["images"][i] -= w2[i] * t[i]
            grads["images"][neg_img[i]] += w2[i] * t[i]
        if h2t[i] > 0:
            grads["captions"][i] += w2[i] * (mined.hard_image[i] - v[i])
            grads["images"][i] -= w2[i] * t[i]
            grads["hard_image"][i] += w2[i] * t[i]
        if h3t[i] > 0:
            grads["images"][i] -= w2[i] * t[i]
            grads["captions"][i] -= w2[i] * v[i]
            if pair_term == "partners":
                grads["partner_image"][i] += w2[i] * mined.partner_caption[i]
                grads["partner_caption"][i] += w2[i] * mined.partner_image[i]
            else:
                grads["hard_image"][i] += w2[i] * mined.hard_caption[i]
                grads["hard_caption"][i] += w2[i] * mined.hard_image[i]

    return LossBreakdown(
        total=total,
        per_term={
            "i2t_batch": h1v,
            "i2t_mined": h2v,
            "mined_pair": h3v,
            "t2i_batch": h1t,
            "t2i_mined": h2t,
            "partner_pair": h3t,
        },
        delta_v=delta_v,
        delta_t=delta_t,
        delta2=delta2,
        weights_1=w1,
        weights_2=w2,
        grads=grads,
    )
