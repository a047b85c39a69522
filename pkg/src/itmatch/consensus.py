"""Corpus-aware embedding heads shared by both modalities.

Local features (region rows or token rows) are pooled with a softmax
attention over their mean-query scores, attended into a frozen bank of
concept embeddings, fused with a learned sigmoid gate, and finally combined
as a learned convex mixture of the three intermediate vectors.  The caption
side additionally mixes a prior concept distribution into its corpus
attention weights.

Forward functions return ``(vector, cache)``; backwards accumulate parameter
gradients into a name-keyed dict and return gradients for their vector
inputs.  The concept bank itself receives no gradient: it is data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    l2_normalize,
    l2_normalize_backward,
    softmax_scaled,
    softmax_scaled_backward,
)

LABEL_TOL = 1e-9


@dataclass
class CorpusEmbedding:
    """Frozen bank of concept vectors, one unit row per concept string."""

    vectors: np.ndarray
    concept_vocab: list[str]

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 2:
            raise ValueError(f"corpus needs >= 2 concept rows, got shape {self.vectors.shape}")
        if len(self.concept_vocab) != self.vectors.shape[0]:
            raise ValueError("concept vocabulary size does not match corpus rows")
        norms = np.linalg.norm(self.vectors, axis=1)
        if np.any(norms == 0):
            raise ValueError("corpus contains a zero concept vector")
        # skip the division when rows are already unit so reloading a
        # checkpointed bank reproduces its bytes exactly
        if np.max(np.abs(norms - 1.0)) > 1e-9:
            self.vectors = self.vectors / norms[:, None]

    @property
    def size(self) -> int:
        return self.vectors.shape[0]


def concept_label(tokens: list[str], concept_vocab: list[str]) -> np.ndarray:
    """Prior distribution over concepts mentioned by a caption.

    Uniform over the concepts whose string occurs among the tokens; uniform
    over all concepts when none occur.
    """
    token_set = set(tokens)
    hits = np.array([1.0 if c in token_set else 0.0 for c in concept_vocab])
    if hits.sum() == 0:
        hits[:] = 1.0
    return hits / hits.sum()


def validate_label(label: np.ndarray, z: int) -> np.ndarray:
    label = np.asarray(label, dtype=np.float64)
    if label.shape != (z,):
        raise ValueError(f"concept label shape {label.shape} does not match corpus size {z}")
    if np.any(label < 0) or abs(label.sum() - 1.0) > LABEL_TOL:
        raise ValueError("concept label must be nonnegative and sum to 1")
    return label


@dataclass
class ConsensusParams:
    """Trainable heads for both modalities plus shared temperatures.

    ``proj_query_*``/``proj_corpus_*`` score a pooled vector against the
    concept bank; ``gate_*`` parameterize the fusion sigmoid; ``stack_*``
    are pre-softmax mixture logits for the final combination.  ``lam`` is
    the softmax inverse temperature, ``eta`` the prior-label mixing ratio.
    """

    proj_query_img: np.ndarray
    proj_corpus_img: np.ndarray
    proj_query_txt: np.ndarray
    proj_corpus_txt: np.ndarray
    gate_w_img: np.ndarray
    gate_b_img: np.ndarray
    gate_w_txt: np.ndarray
    gate_b_txt: np.ndarray
    stack_img: np.ndarray
    stack_txt: np.ndarray
    lam: float
    eta: float

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError(f"attention temperature must be positive, got {self.lam}")
        if not (0.0 <= self.eta <= 1.0):
            raise ValueError(f"prior ratio must lie in [0, 1], got {self.eta}")

    def named_arrays(self, prefix: str = "consensus"):
        for name in (
            "proj_query_img",
            "proj_corpus_img",
            "proj_query_txt",
            "proj_corpus_txt",
            "gate_w_img",
            "gate_b_img",
            "gate_w_txt",
            "gate_b_txt",
            "stack_img",
            "stack_txt",
        ):
            yield f"{prefix}.{name}", getattr(self, name)


def init_consensus(rng: np.random.Generator, d: int, lam: float, eta: float) -> ConsensusParams:
    bound = 1.0 / np.sqrt(d)

    def proj():
        return rng.uniform(-bound, bound, size=(d, d))

    return ConsensusParams(
        proj_query_img=proj(),
        proj_corpus_img=proj(),
        proj_query_txt=proj(),
        proj_corpus_txt=proj(),
        gate_w_img=np.zeros(2 * d),
        gate_b_img=np.zeros(1),
        gate_w_txt=np.zeros(2 * d),
        gate_b_txt=np.zeros(1),
        stack_img=np.zeros(3),
        stack_txt=np.zeros(3),
        lam=lam,
        eta=eta,
    )


# ---------------------------------------------------------------------------
# operations


def self_attention_pool(features: np.ndarray, lam: float):
    """Pool local rows into one unit vector, the mean row acting as query."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ValueError(f"cannot pool features of shape {features.shape}")
    query = features.mean(axis=0)
    scores = features @ query
    weights = softmax_scaled(scores, lam)
    pooled = weights @ features
    norm = float(np.linalg.norm(pooled))
    out = l2_normalize(pooled)
    return out, (features, query, weights, out, norm, lam)


def self_attention_pool_backward(d_out: np.ndarray, cache) -> np.ndarray:
    features, query, weights, out, norm, lam = cache
    d_pooled = l2_normalize_backward(out, norm, d_out)
    d_weights = features @ d_pooled
    d_features = np.outer(weights, d_pooled)
    d_scores = softmax_scaled_backward(weights, d_weights, lam)
    d_query = features.T @ d_scores
    d_features += np.outer(d_scores, query)
    d_features += d_query / features.shape[0]
    return d_features


def corpus_attend(query: np.ndarray, corpus: CorpusEmbedding, proj_query: np.ndarray, proj_corpus: np.ndarray, lam: float, prior: np.ndarray | None = None, eta: float = 0.0):
    """Attend a pooled vector into the concept bank.

    Scores are bilinear in two learned projections.  When ``prior`` is given
    the attention weights become ``(1 - eta) * softmax + eta * prior``,
    which stays a convex combination.
    """
    projected_query = query @ proj_query
    projected_corpus = corpus.vectors @ proj_corpus
    scores = projected_corpus @ projected_query
    soft = softmax_scaled(scores, lam)
    if prior is not None:
        prior = validate_label(prior, corpus.size)
        weights = (1.0 - eta) * soft + eta * prior
    else:
        weights = soft
    attended = weights @ corpus.vectors
    norm = float(np.linalg.norm(attended))
    out = l2_normalize(attended)
    cache = (query, corpus, proj_query, proj_corpus, projected_query, projected_corpus, soft, out, norm, lam, eta, prior is not None)
    return out, cache


def corpus_attend_backward(d_out: np.ndarray, cache, grads: dict, query_key: str, corpus_key: str):
    (query, corpus, proj_query, proj_corpus, projected_query, projected_corpus, soft, out, norm, lam, eta, has_prior) = cache
    d_attended = l2_normalize_backward(out, norm, d_out)
    d_weights = corpus.vectors @ d_attended
    d_soft = (1.0 - eta) * d_weights if has_prior else d_weights
    d_scores = softmax_scaled_backward(soft, d_soft, lam)
    d_projected_query = projected_corpus.T @ d_scores
    d_projected_corpus = np.outer(d_scores, projected_query)
    grads[query_key] += np.outer(query, d_projected_query)
    grads[corpus_key] += corpus.vectors.T @ d_projected_corpus
    return d_projected_query @ proj_query.T


def image_corpus_attend(pooled: np.ndarray, corpus: CorpusEmbedding, params: ConsensusParams):
    """Image-side corpus attention."""
    return corpus_attend(pooled, corpus, params.proj_query_img, params.proj_corpus_img, params.lam)


def caption_corpus_attend(pooled: np.ndarray, corpus: CorpusEmbedding, label: np.ndarray, params: ConsensusParams, mixture: str = "prior"):
    """Caption-side corpus attention with the prior concept label mixed in.

    ``mixture="literal"`` drops the prior and reduces to the plain softmax
    (which makes ``eta`` inert); kept only for comparison runs.
    """
    if mixture not in ("prior", "literal"):
        raise ValueError(f"unknown label mixture mode: {mixture}")
    if mixture == "literal":
        return corpus_attend(pooled, corpus, params.proj_query_txt, params.proj_corpus_txt, params.lam)
    return corpus_attend(
        pooled, corpus, params.proj_query_txt, params.proj_corpus_txt, params.lam, prior=label, eta=params.eta
    )


def gated_fuse(direct: np.ndarray, attended: np.ndarray, gate_w: np.ndarray, gate_b: np.ndarray):
    """Convex blend of the pooled and corpus-attended vectors.

    The blend weight is a sigmoid read-out of their concatenation, so the
    model can learn per-item how much corpus knowledge to inject.
    """
    cat = np.concatenate([direct, attended])
    pre = float(gate_w @ cat + gate_b[0])
    u = 1.0 / (1.0 + np.exp(-pre)) if pre >= 0 else np.exp(pre) / (1.0 + np.exp(pre))
    fused = u * direct + (1.0 - u) * attended
    norm = float(np.linalg.norm(fused))
    out = l2_normalize(fused)
    return out, (direct, attended, cat, gate_w, u, out, norm)


def gated_fuse_backward(d_out: np.ndarray, cache, grads: dict, w_key: str, b_key: str):
    direct, attended, cat, gate_w, u, out, norm = cache
    d_fused = l2_normalize_backward(out, norm, d_out)
    d_u = float(np.dot(d_fused, direct - attended))
    d_pre = d_u * u * (1.0 - u)
    grads[w_key] += d_pre * cat
    grads[b_key] += d_pre
    d = direct.shape[0]
    d_direct = u * d_fused + d_pre * gate_w[:d]
    d_attended = (1.0 - u) * d_fused + d_pre * gate_w[d:]
    return d_direct, d_attended


def stack_final(direct: np.ndarray, attended: np.ndarray, fused: np.ndarray, logits: np.ndarray):
    """Learned softmax-weighted combination of the three head vectors."""
    weights = softmax_scaled(logits, 1.0)
    combined = weights[0] * direct + weights[1] * attended + weights[2] * fused
    norm = float(np.linalg.norm(combined))
    out = l2_normalize(combined)
    return out, (direct, attended, fused, weights, out, norm)


def stack_final_backward(d_out: np.ndarray, cache, grads: dict, logits_key: str):
    direct, attended, fused, weights, out, norm = cache
    d_combined = l2_normalize_backward(out, norm, d_out)
    d_weights = np.array(
        [float(np.dot(d_combined, direct)), float(np.dot(d_combined, attended)), float(np.dot(d_combined, fused))]
    )
    grads[logits_key] += softmax_scaled_backward(weights, d_weights, 1.0)
    return weights[0] * d_combined, weights[1] * d_combined, weights[2] * d_combined
