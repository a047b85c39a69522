"""Two-phase training loop, optimizer, checkpointing, and metrics logging.

Phase 1 minimizes the plain bidirectional hinge over aligned batches.
Phase 2 restricts anchors to the mining pool, re-draws one hard caption and
one hard image per anchor each epoch, weights the two hinge triples with the
penalty scheme, and swaps the in-batch margins for per-anchor values driven
by caption relevance gaps.  Every random decision flows from the run seed,
so a (seed, config, data) triple fully determines the metrics log.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cider as cider_mod
from . import dataio, losses, mining, model
from .config import TrainConfig
from .consensus import CorpusEmbedding

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

METRICS_COLUMNS = (
    "step",
    "phase",
    "loss",
    "i2t_batch",
    "i2t_mined",
    "mined_pair",
    "t2i_batch",
    "t2i_mined",
    "partner_pair",
    "w1",
    "w2",
    "delta_v",
    "delta_t",
)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, what: str):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


@dataclass
class ModelState:
    params: model.ModelParams
    moment_m: dict[str, np.ndarray]
    moment_v: dict[str, np.ndarray]
    step: int
    epoch: int
    phase: int
    corpus: CorpusEmbedding
    vocabulary: list[str]
    config: TrainConfig
    dataset_fingerprint: str
    regions_per_image: int = 0


def init_state(config: TrainConfig, dataset: dataio.Dataset) -> ModelState:
    config.validate()
    if dataset.corpus.vectors.shape[1] != config.embed_dim:
        raise ValueError(
            f"corpus dim {dataset.corpus.vectors.shape[1]} != configured embed_dim {config.embed_dim}"
        )
    rng = np.random.default_rng(config.seed)
    params = model.init_model(
        rng,
        d_in=dataset.features.shape[2],
        d=config.embed_dim,
        word_dim=config.word_dim,
        vocab_size=len(dataset.vocabulary),
        lam=config.attention_lam,
        eta=config.prior_eta,
    )
    zeros = model.zero_grads(params)
    return ModelState(
        params=params,
        moment_m=zeros,
        moment_v={k: np.zeros_like(v) for k, v in zeros.items()},
        step=0,
        epoch=0,
        phase=1,
        corpus=dataset.corpus,
        vocabulary=list(dataset.vocabulary),
        config=config,
        dataset_fingerprint=dataset.fingerprint,
        regions_per_image=dataset.features.shape[1],
    )


def optimizer_step(state: ModelState, grads: dict[str, np.ndarray], lr: float) -> None:
    """Clip to the configured global norm, then apply one update in place."""
    arrays = state.params.flat()
    if set(grads) != set(arrays):
        raise ValueError("gradient keys do not match parameter keys")
    for name in arrays:
        if grads[name].shape != arrays[name].shape:
            raise ValueError(f"gradient shape mismatch for {name}")
    norm_sq = sum(float(np.sum(g * g)) for g in grads.values())
    global_norm = float(np.sqrt(norm_sq))
    scale = 1.0
    clip = state.config.grad_clip
    if global_norm > clip:
        scale = clip / global_norm
    t = state.step + 1
    for name in sorted(arrays):
        g = grads[name] * scale
        p = arrays[name]
        if state.config.optimizer == "adam":
            m = state.moment_m[name]
            v = state.moment_v[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            m_hat = m / (1.0 - ADAM_BETA1**t)
            v_hat = v / (1.0 - ADAM_BETA2**t)
            p -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        else:
            p -= lr * g
    state.step = t


class MetricsWriter:
    """Tab-separated, fixed-precision step log; identical runs give
    identical bytes."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        self.rows: list[str] = ["\t".join(METRICS_COLUMNS)]

    def log(self, step: int, phase: int, breakdown: losses.LossBreakdown) -> None:
        terms = breakdown.per_term
        zeros = np.zeros(1)

        def mean(key):
            return float(np.mean(terms.get(key, zeros)))

        values = [
            str(step),
            str(phase),
            f"{breakdown.total:.9f}",
            f"{mean('i2t_batch'):.9f}",
            f"{mean('i2t_mined'):.9f}",
            f"{mean('mined_pair'):.9f}",
            f"{mean('t2i_batch'):.9f}",
            f"{mean('t2i_mined'):.9f}",
            f"{mean('partner_pair'):.9f}",
            f"{float(np.mean(breakdown.weights_1)):.9f}",
            f"{float(np.mean(breakdown.weights_2)):.9f}",
            f"{float(np.mean(breakdown.delta_v)):.9f}",
            f"{float(np.mean(breakdown.delta_t)):.9f}",
        ]
        self.rows.append("\t".join(values))

    def flush(self) -> None:
        if self.path is not None:
            self.path.write_text("\n".join(self.rows) + "\n")


# ---------------------------------------------------------------------------
# batch plumbing


class _EmbedBatch:
    """Embeds the unique items of one batch and scatters gradients back."""

    def __init__(self, state: ModelState, dataset: dataio.Dataset):
        self.state = state
        self.dataset = dataset
        self.images: dict[int, tuple[np.ndarray, tuple]] = {}
        self.captions: dict[int, tuple[np.ndarray, tuple]] = {}
        self.d_images: dict[int, np.ndarray] = {}
        self.d_captions: dict[int, np.ndarray] = {}

    def image(self, idx: int) -> np.ndarray:
        if idx not in self.images:
            self.images[idx] = model.embed_image(
                self.dataset.features[idx], self.state.params, self.state.corpus
            )
        return self.images[idx][0]

    def caption(self, idx: int) -> np.ndarray:
        if idx not in self.captions:
            self.captions[idx] = model.embed_caption(
                self.dataset.caption_indices[idx],
                self.dataset.labels[idx],
                self.state.params,
                self.state.corpus,
                mixture=self.state.config.label_mixture,
            )
        return self.captions[idx][0]

    def add_image_grad(self, idx: int, grad: np.ndarray) -> None:
        self.d_images[idx] = self.d_images.get(idx, 0.0) + grad

    def add_caption_grad(self, idx: int, grad: np.ndarray) -> None:
        self.d_captions[idx] = self.d_captions.get(idx, 0.0) + grad

    def backward(self) -> dict[str, np.ndarray]:
        grads = model.zero_grads(self.state.params)
        for idx in sorted(self.d_images):
            model.embed_image_backward(self.d_images[idx], self.images[idx][1], self.state.params, grads)
        for idx in sorted(self.d_captions):
            model.embed_caption_backward(self.d_captions[idx], self.captions[idx][1], self.state.params, grads)
        return grads


def _pair_batches(dataset: dataio.Dataset, image_indices: list[int], batch_size: int, rng: np.random.Generator):
    """Yield batches of (image, caption) pairs with distinct images per batch.

    One round per caption slot, so an epoch covers every caption while a
    batch never carries two captions of one image (which would poison the
    in-batch negatives).
    """
    max_caps = max(len(dataset.image_to_captions[i]) for i in image_indices)
    for slot in range(max_caps):
        pairs = [
            (i, dataset.image_to_captions[i][slot])
            for i in image_indices
            if slot < len(dataset.image_to_captions[i])
        ]
        order = rng.permutation(len(pairs))
        for start in range(0, len(pairs), batch_size):
            chunk = [pairs[k] for k in order[start : start + batch_size]]
            if len(chunk) >= 2:
                yield chunk


def _check_finite(state: ModelState, total: float) -> None:
    if not np.isfinite(total):
        raise TrainingDiverged(state.step, "loss")
    for name, arr in state.params.named_arrays():
        if not np.all(np.isfinite(arr)):
            raise TrainingDiverged(state.step, f"parameter {name}")


# ---------------------------------------------------------------------------
# phase 1


def run_phase1(config: TrainConfig, dataset: dataio.Dataset, metrics: MetricsWriter | None = None, state: ModelState | None = None) -> ModelState:
    if state is None:
        state = init_state(config, dataset)
    state.phase = 1
    train_images = dataset.splits.get("train", [])
    if not train_images:
        raise ValueError("dataset has no training split")
    for epoch in range(config.phase1_epochs):
        rng = np.random.default_rng([config.seed, 1, epoch])
        for chunk in _pair_batches(dataset, train_images, config.batch_size, rng):
            batch_ctx = _EmbedBatch(state, dataset)
            image_rows = np.vstack([batch_ctx.image(i) for i, _ in chunk])
            caption_rows = np.vstack([batch_ctx.caption(j) for _, j in chunk])
            batch = losses.BatchSimilarities.from_embeddings(image_rows, caption_rows)
            out = losses.triplet_loss(batch, config.delta1, negatives=config.negatives)
            for pos, (i, j) in enumerate(chunk):
                batch_ctx.add_image_grad(i, out.grads["images"][pos])
                batch_ctx.add_caption_grad(j, out.grads["captions"][pos])
            optimizer_step(state, batch_ctx.backward(), config.phase1_lr)
            _check_finite(state, out.total)
            if metrics is not None:
                metrics.log(state.step, 1, out)
        state.epoch += 1
    if metrics is not None:
        metrics.flush()
    return state


# ---------------------------------------------------------------------------
# mining plumbing


@dataclass
class MiningResult:
    candidates: mining.PredictiveCandidates
    lists: mining.TopPositionLists


def embed_all(state: ModelState, dataset: dataio.Dataset, image_indices: list[int], caption_indices: list[int]):
    images = np.vstack(
        [model.embed_image(dataset.features[i], state.params, state.corpus)[0] for i in image_indices]
    )
    captions = np.vstack(
        [
            model.embed_caption(
                dataset.caption_indices[j],
                dataset.labels[j],
                state.params,
                state.corpus,
                mixture=state.config.label_mixture,
            )[0]
            for j in caption_indices
        ]
    )
    return images, captions


def select_pool(config: TrainConfig, dataset: dataio.Dataset) -> tuple[list[int], list[int]]:
    """Seeded choice of pool images plus a round-robin slice of their
    captions, so every pool image keeps at least one caption."""
    train_images = dataset.splits["train"]
    rng = np.random.default_rng([config.seed, 4])
    a = min(config.pool_images, len(train_images))
    chosen = sorted(int(i) for i in rng.choice(len(train_images), size=a, replace=False))
    pool_images = [train_images[i] for i in chosen]
    b = min(config.pool_captions, sum(len(dataset.image_to_captions[i]) for i in pool_images))
    if b < a:
        raise ValueError(f"pool_captions={b} cannot cover {a} pool images")
    pool_captions: list[int] = []
    slot = 0
    while len(pool_captions) < b:
        added = False
        for i in pool_images:
            caps = dataset.image_to_captions[i]
            if slot < len(caps) and len(pool_captions) < b:
                pool_captions.append(caps[slot])
                added = True
        if not added:
            break
        slot += 1
    return pool_images, pool_captions


def build_candidates(
    image_emb: np.ndarray,
    caption_emb: np.ndarray,
    pool_images: list[int],
    pool_captions: list[int],
    dataset: dataio.Dataset,
) -> mining.PredictiveCandidates:
    image_pos = {g: p for p, g in enumerate(pool_images)}
    caption_to_image = {}
    image_to_captions: dict[int, list[int]] = {p: [] for p in range(len(pool_images))}
    for p, j in enumerate(pool_captions):
        owner = dataset.caption_to_image[j]
        if owner not in image_pos:
            raise ValueError(f"pool caption {j} belongs to an image outside the pool")
        caption_to_image[p] = image_pos[owner]
        image_to_captions[image_pos[owner]].append(p)
    return mining.PredictiveCandidates(
        image_emb=image_emb,
        caption_emb=caption_emb,
        caption_to_image=caption_to_image,
        image_to_captions=image_to_captions,
        image_ids=list(pool_images),
        caption_ids=list(pool_captions),
    )


def mine_predictive(state: ModelState, dataset: dataio.Dataset, config: TrainConfig) -> MiningResult:
    """Embed the pool with the current model and build its top lists."""
    pool_images, pool_captions = select_pool(config, dataset)
    image_emb, caption_emb = embed_all(state, dataset, pool_images, pool_captions)
    cands = build_candidates(image_emb, caption_emb, pool_images, pool_captions, dataset)
    sim = mining.build_similarity(cands)
    lists = mining.top_positions(sim, cands, k=config.top_k, q=config.top_q)
    return MiningResult(candidates=cands, lists=lists)


# ---------------------------------------------------------------------------
# phase 2


def _phi_cache_lookup(cache, idf, dataset, image_idx: int, caption_idx: int) -> float:
    key = (image_idx, caption_idx)
    if key not in cache:
        gt = [dataset.caption_tokens[j] for j in dataset.image_to_captions[image_idx]]
        cache[key] = cider_mod.relevance(gt, dataset.caption_tokens[caption_idx], idf)
    return cache[key]


def run_phase2(
    config: TrainConfig,
    state: ModelState,
    dataset: dataio.Dataset,
    predictive: MiningResult | None,
    metrics: MetricsWriter | None = None,
) -> ModelState:
    if predictive is None:
        raise ValueError("phase 2 requires mined predictive candidates")
    state.phase = 2
    cands = predictive.candidates
    lists = predictive.lists

    train_images = dataset.splits["train"]
    idf = cider_mod.build_idf([[dataset.caption_tokens[j] for j in dataset.image_to_captions[i]] for i in train_images])
    phi_cache: dict[tuple[int, int], float] = {}

    # anchors are the pool pairs; positions into the pool map back to
    # dataset indices through the candidate id lists
    anchors = [
        (cands.caption_to_image[p], p) for p in range(cands.num_captions)
    ]
    anchors_by_image: dict[int, list[int]] = {}
    for img_pos, cap_pos in anchors:
        anchors_by_image.setdefault(img_pos, []).append(cap_pos)

    for epoch in range(config.phase2_epochs):
        if config.mine_refresh_epochs and epoch > 0 and epoch % config.mine_refresh_epochs == 0:
            refreshed = mine_predictive(state, dataset, config)
            cands, lists = refreshed.candidates, refreshed.lists
        draw_rng = np.random.default_rng([config.seed, 3, epoch])
        quads = {}
        for img_pos in sorted(anchors_by_image):
            for cap_pos in anchors_by_image[img_pos]:
                quads[(img_pos, cap_pos)] = mining.draw_quadruple(lists, cands, img_pos, cap_pos, draw_rng)

        shuffle_rng = np.random.default_rng([config.seed, 2, epoch])
        max_caps = max(len(v) for v in anchors_by_image.values())
        for slot in range(max_caps):
            slot_anchors = [
                (img_pos, caps[slot])
                for img_pos, caps in sorted(anchors_by_image.items())
                if slot < len(caps)
            ]
            order = shuffle_rng.permutation(len(slot_anchors))
            for start in range(0, len(slot_anchors), config.batch_size):
                chunk = [slot_anchors[k] for k in order[start : start + config.batch_size]]
                if len(chunk) < 2:
                    continue
                _phase2_step(config, state, dataset, cands, quads, chunk, idf, phi_cache, metrics)
        state.epoch += 1
    if metrics is not None:
        metrics.flush()
    return state


def _phase2_step(config, state, dataset, cands, quads, chunk, idf, phi_cache, metrics):
    ctx = _EmbedBatch(state, dataset)
    b = len(chunk)
    quad_list = [quads[key] for key in chunk]

    anchor_images = [cands.image_ids[q.anchor_image] for q in quad_list]
    anchor_captions = [cands.caption_ids[q.anchor_caption] for q in quad_list]
    hard_captions = [cands.caption_ids[q.hard_caption] for q in quad_list]
    hard_images = [cands.image_ids[q.hard_image] for q in quad_list]
    partner_captions = [cands.caption_ids[q.hard_image_caption] for q in quad_list]
    partner_images = [cands.image_ids[q.hard_caption_image] for q in quad_list]

    image_rows = np.vstack([ctx.image(i) for i in anchor_images])
    caption_rows = np.vstack([ctx.caption(j) for j in anchor_captions])
    mined_emb = losses.MinedEmbeddings(
        hard_caption=np.vstack([ctx.caption(j) for j in hard_captions]),
        hard_image=np.vstack([ctx.image(i) for i in hard_images]),
        partner_caption=np.vstack([ctx.caption(j) for j in partner_captions]),
        partner_image=np.vstack([ctx.image(i) for i in partner_images]),
    )
    batch = losses.BatchSimilarities.from_embeddings(image_rows, caption_rows, mined_emb)
    neg_cap, neg_img = losses.hardest_negatives(batch.scores)

    margins = []
    weights = []
    idx = np.arange(b)
    pos_scores = np.diag(batch.scores)
    s_batch_negcap = batch.scores[idx, neg_cap]
    s_batch_negimg = batch.scores[neg_img, idx]
    for pos in range(b):
        anchor_img = anchor_images[pos]
        positive_caption = anchor_captions[pos]
        neg_caption = anchor_captions[neg_cap[pos]]
        neg_image = anchor_images[neg_img[pos]]
        partner_of_neg_image = dataset.image_to_captions[neg_image][0]
        phi_pos = _phi_cache_lookup(phi_cache, idf, dataset, anchor_img, positive_caption)
        phi_neg = _phi_cache_lookup(phi_cache, idf, dataset, anchor_img, neg_caption)
        phi_partner = _phi_cache_lookup(phi_cache, idf, dataset, anchor_img, partner_of_neg_image)
        clamp = lambda x: min(max(x / config.beta, 0.0), config.delta_max)
        margins.append(
            cider_mod.AdaptiveMargins(
                delta_v=clamp(phi_pos - phi_neg), delta_t=clamp(phi_pos - phi_partner), beta=config.beta
            )
        )
        weights.append(
            losses.penalty_weights(
                float(batch.s_anchor_hardcap[pos]),
                float(s_batch_negcap[pos]),
                float(batch.s_hardimg_anchor[pos]),
                float(s_batch_negimg[pos]),
                tau=config.tau,
                mu=config.mu,
            )
        )

    out = losses.hierarchical_loss(batch, margins, weights, config.delta2, pair_term=config.pair_term)
    for pos in range(b):
        ctx.add_image_grad(anchor_images[pos], out.grads["images"][pos])
        ctx.add_caption_grad(anchor_captions[pos], out.grads["captions"][pos])
        ctx.add_caption_grad(hard_captions[pos], out.grads["hard_caption"][pos])
        ctx.add_image_grad(hard_images[pos], out.grads["hard_image"][pos])
        ctx.add_caption_grad(partner_captions[pos], out.grads["partner_caption"][pos])
        ctx.add_image_grad(partner_images[pos], out.grads["partner_image"][pos])
    optimizer_step(state, ctx.backward(), config.phase2_lr)
    _check_finite(state, out.total)
    if metrics is not None:
        metrics.log(state.step, 2, out)


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(path: str | Path, state: ModelState) -> None:
    header = {
        "kind": "checkpoint",
        "step": state.step,
        "epoch": state.epoch,
        "phase": state.phase,
        "config": state.config.to_dict(),
        "vocabulary": state.vocabulary,
        "concept_vocab": state.corpus.concept_vocab,
        "dataset_fingerprint": state.dataset_fingerprint,
        "regions_per_image": state.regions_per_image,
        "shapes": {name: list(arr.shape) for name, arr in state.params.named_arrays()},
    }
    matrices: dict[str, tuple[np.ndarray, int]] = {
        "corpus": (state.corpus.vectors, dataio.VERSION_F64)
    }
    for name, arr in state.params.named_arrays():
        matrices[f"p.{name}"] = (arr, dataio.VERSION_F64)
        matrices[f"m.{name}"] = (state.moment_m[name], dataio.VERSION_F64)
        matrices[f"v.{name}"] = (state.moment_v[name], dataio.VERSION_F64)
    dataio.save_bundle(path, header, matrices)


def load_checkpoint(path: str | Path) -> ModelState:
    header, matrices = dataio.load_bundle(path)
    if header.get("kind") != "checkpoint":
        raise dataio.DataFormatError(f"{path} is not a checkpoint bundle")
    config = TrainConfig.from_dict(header["config"])
    vocabulary = list(header["vocabulary"])
    corpus = CorpusEmbedding(vectors=matrices["corpus"], concept_vocab=list(header["concept_vocab"]))
    rng = np.random.default_rng(0)
    params = model.init_model(
        rng,
        d_in=header["shapes"]["image.w_f"][0],
        d=config.embed_dim,
        word_dim=config.word_dim,
        vocab_size=len(vocabulary),
        lam=config.attention_lam,
        eta=config.prior_eta,
    )
    moment_m = {}
    moment_v = {}
    for name, arr in params.named_arrays():
        shape = tuple(header["shapes"][name])
        arr[...] = matrices[f"p.{name}"].reshape(shape)
        moment_m[name] = matrices[f"m.{name}"].reshape(shape).copy()
        moment_v[name] = matrices[f"v.{name}"].reshape(shape).copy()
    return ModelState(
        params=params,
        moment_m=moment_m,
        moment_v=moment_v,
        step=int(header["step"]),
        epoch=int(header["epoch"]),
        phase=int(header["phase"]),
        corpus=corpus,
        vocabulary=vocabulary,
        config=config,
        dataset_fingerprint=header["dataset_fingerprint"],
        regions_per_image=int(header.get("regions_per_image", 0)),
    )
