"""Shared helpers for the test suite."""

import numpy as np

from itmatch import losses
from itmatch.cider import AdaptiveMargins


def unit_rows(rng, n, d):
    m = rng.standard_normal((n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def away_from_boundaries(batch, delta_v, delta_t, delta2, gap):
    """True when every hinge and every argmax sits clear of a boundary, so
    finite differences stay on one side of the kink."""
    scores = batch.scores
    b = scores.shape[0]
    masked = scores.copy()
    np.fill_diagonal(masked, -np.inf)
    if b > 2:
        by_row = np.sort(masked, axis=1)
        by_col = np.sort(masked, axis=0)
        if np.any(by_row[:, -1] - by_row[:, -2] < gap) or np.any(by_col[-1] - by_col[-2] < gap):
            return False
    pos = np.diag(scores)
    neg_cap, neg_img = losses.hardest_negatives(scores)
    idx = np.arange(b)
    residuals = [
        np.asarray(delta_v) - pos + scores[idx, neg_cap],
        np.asarray(delta_t) - pos + scores[neg_img, idx],
    ]
    if batch.mined is not None:
        residuals += [
            delta2 - pos + batch.s_anchor_hardcap,
            delta2 - pos + batch.s_hardimg_anchor,
            delta2 - pos + batch.s_hard_pair,
            delta2 - pos + batch.s_partner_pair,
        ]
    return bool(np.all(np.abs(np.concatenate(residuals)) > gap))


def safe_mined_batch(seed, b=4, d=6, delta_v=0.3, delta_t=0.25, delta2=0.05, gap=1e-3):
    """Random mined batch redrawn until no hinge sits near its boundary."""
    rng = np.random.default_rng(seed)
    while True:
        parts = [unit_rows(rng, b, d) for _ in range(6)]
        mined = losses.MinedEmbeddings(*parts[2:])
        batch = losses.BatchSimilarities.from_embeddings(parts[0], parts[1], mined)
        if away_from_boundaries(batch, delta_v, delta_t, delta2, gap):
            margins = [AdaptiveMargins(delta_v=delta_v, delta_t=delta_t, beta=1.0) for _ in range(b)]
            return batch, margins


def safe_plain_batch(seed, b=4, d=6, delta1=0.4, gap=1e-3):
    rng = np.random.default_rng(seed)
    while True:
        images = unit_rows(rng, b, d)
        captions = unit_rows(rng, b, d)
        batch = losses.BatchSimilarities.from_embeddings(images, captions)
        if away_from_boundaries(batch, delta1, delta1, 0.0, gap):
            return batch
