"""Offline hard-negative mining over a pool of precomputed embeddings.

A pool of image and caption embeddings (from an earlier training round or an
external model) is scanned for the non-matching pairs that score highest:
those are the negatives worth extra training pressure.  Per anchor pair we
then draw one hard caption and one hard image from the top lists, and resolve
their ground-truth partners.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import as_matrix


@dataclass
class PredictiveCandidates:
    """Embedding pool for mining: ``a`` images and ``b`` captions.

    ``caption_to_image[j]`` is the pool position of caption j's image;
    ``image_to_captions[i]`` lists the pool positions of image i's captions.
    ``image_ids``/``caption_ids`` map pool positions back to dataset indices
    (identity when the pool is the whole dataset).
    """

    image_emb: np.ndarray
    caption_emb: np.ndarray
    caption_to_image: dict[int, int]
    image_to_captions: dict[int, list[int]]
    image_ids: list[int] = field(default_factory=list)
    caption_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.image_emb = as_matrix(self.image_emb, "image embeddings")
        self.caption_emb = as_matrix(self.caption_emb, "caption embeddings")
        a, b = self.image_emb.shape[0], self.caption_emb.shape[0]
        if a < 1 or b < 1:
            raise ValueError("mining pool must contain at least one image and one caption")
        if not self.image_ids:
            self.image_ids = list(range(a))
        if not self.caption_ids:
            self.caption_ids = list(range(b))
        for j in range(b):
            if j not in self.caption_to_image:
                raise ValueError(f"caption {j} has no owning image")
        for i in range(a):
            if not self.image_to_captions.get(i):
                raise ValueError(f"image {i} has no captions in the pool")

    @property
    def num_images(self) -> int:
        return self.image_emb.shape[0]

    @property
    def num_captions(self) -> int:
        return self.caption_emb.shape[0]


@dataclass
class SimilarityMatrices:
    """Cosine scores between pool captions and pool images.

    ``caption_vs_image[j, i]`` scores caption j against image i;
    ``image_vs_caption`` is its transpose.
    """

    caption_vs_image: np.ndarray
    image_vs_caption: np.ndarray


def build_similarity(cands: PredictiveCandidates) -> SimilarityMatrices:
    if cands.image_emb.shape[1] != cands.caption_emb.shape[1]:
        raise ValueError(
            f"embedding dim mismatch: images {cands.image_emb.shape} vs captions {cands.caption_emb.shape}"
        )
    caption_vs_image = cands.caption_emb @ cands.image_emb.T
    return SimilarityMatrices(caption_vs_image=caption_vs_image, image_vs_caption=caption_vs_image.T)


@dataclass
class TopPositionLists:
    """Hardest non-matching candidates per pool item, ground truth excluded.

    ``captions_for_image[i]``: the k captions scoring highest against image i
    that do not belong to it.  ``images_for_caption[j]``: the q non-matching
    images for caption j.  Lists are sorted by descending score, ties broken
    by ascending index.
    """

    captions_for_image: list[list[int]]
    images_for_caption: list[list[int]]
    k: int
    q: int


def _top_filtered(scores: np.ndarray, banned: set[int], count: int) -> list[int]:
    # stable sort on (-score, index) gives the deterministic tie-break
    order = np.lexsort((np.arange(scores.size), -scores))
    kept = [int(j) for j in order if int(j) not in banned]
    return kept[:count]


def top_positions(sim: SimilarityMatrices, cands: PredictiveCandidates, k: int, q: int) -> TopPositionLists:
    a, b = cands.num_images, cands.num_captions
    if k < 1 or q < 1:
        raise ValueError(f"top list sizes must be >= 1, got k={k} q={q}")
    captions_for_image = []
    for i in range(a):
        own = set(cands.image_to_captions[i])
        available = b - len(own)
        if k > available:
            raise ValueError(f"k={k} exceeds the {available} non-matching captions of image {i}")
        captions_for_image.append(_top_filtered(sim.image_vs_caption[i], own, k))
    images_for_caption = []
    for j in range(b):
        own = {cands.caption_to_image[j]}
        available = a - 1
        if q > available:
            raise ValueError(f"q={q} exceeds the {available} non-matching images of caption {j}")
        images_for_caption.append(_top_filtered(sim.caption_vs_image[j], own, q))
    return TopPositionLists(captions_for_image=captions_for_image, images_for_caption=images_for_caption, k=k, q=q)


@dataclass(frozen=True)
class MinedQuadruple:
    """One anchor pair plus its mined negatives and their true partners.

    All fields are pool positions.  ``hard_caption`` does not belong to
    ``anchor_image`` and ``hard_image`` does not match ``anchor_caption``;
    ``hard_image_caption`` is a ground-truth caption of ``hard_image`` and
    ``hard_caption_image`` the ground-truth image of ``hard_caption``.
    """

    anchor_image: int
    anchor_caption: int
    hard_caption: int
    hard_image: int
    hard_image_caption: int
    hard_caption_image: int


def draw_quadruple(
    lists: TopPositionLists,
    cands: PredictiveCandidates,
    anchor_image: int,
    anchor_caption: int,
    rng: int | np.random.Generator,
) -> MinedQuadruple:
    """Draw uniformly from the anchor's top lists; deterministic given rng."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    cap_list = lists.captions_for_image[anchor_image]
    img_list = lists.images_for_caption[anchor_caption]
    if not cap_list or not img_list:
        raise ValueError(f"empty top list for anchor ({anchor_image}, {anchor_caption})")
    hard_caption = int(cap_list[rng.integers(0, len(cap_list))])
    hard_image = int(img_list[rng.integers(0, len(img_list))])
    return MinedQuadruple(
        anchor_image=anchor_image,
        anchor_caption=anchor_caption,
        hard_caption=hard_caption,
        hard_image=hard_image,
        hard_image_caption=int(cands.image_to_captions[hard_image][0]),
        hard_caption_image=int(cands.caption_to_image[hard_caption]),
    )
