"""Candidate encoders: linear projection for image regions, bi-GRU for text.

Region features pass through one learned affine map; token sequences pass
through a word embedding and a pair of GRUs scanning in opposite directions
whose per-position states are averaged.  Both encoders normalize every output
row to unit length.  Forward functions return ``(output, cache)``; the
``*_backward`` companions consume the cache and accumulate parameter
gradients into a name-keyed dict, reverse-mode by hand.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import l2_normalize_rows, l2_normalize_rows_backward


@dataclass
class ImageEncoderParams:
    w_f: np.ndarray  # (d_in, d)
    b_f: np.ndarray  # (d,)

    def named_arrays(self, prefix: str = "image"):
        yield f"{prefix}.w_f", self.w_f
        yield f"{prefix}.b_f", self.b_f


@dataclass
class GRUBlock:
    """Weights for one scan direction: update (z), reset (r), candidate (h).

    ``w_*`` act on the input, ``u_*`` on the previous hidden state.
    """

    w_z: np.ndarray
    u_z: np.ndarray
    b_z: np.ndarray
    w_r: np.ndarray
    u_r: np.ndarray
    b_r: np.ndarray
    w_h: np.ndarray
    u_h: np.ndarray
    b_h: np.ndarray

    def named_arrays(self, prefix: str):
        for name in ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class TextEncoderParams:
    w_e: np.ndarray  # (vocab, word_dim)
    fwd: GRUBlock
    bwd: GRUBlock

    def named_arrays(self, prefix: str = "text"):
        yield f"{prefix}.w_e", self.w_e
        yield from self.fwd.named_arrays(f"{prefix}.fwd")
        yield from self.bwd.named_arrays(f"{prefix}.bwd")


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_image_encoder(rng: np.random.Generator, d_in: int, d: int) -> ImageEncoderParams:
    return ImageEncoderParams(w_f=_uniform(rng, (d_in, d), d_in), b_f=np.zeros(d))


def init_gru_block(rng: np.random.Generator, in_dim: int, hid: int) -> GRUBlock:
    return GRUBlock(
        w_z=_uniform(rng, (in_dim, hid), in_dim),
        u_z=_uniform(rng, (hid, hid), hid),
        b_z=np.zeros(hid),
        w_r=_uniform(rng, (in_dim, hid), in_dim),
        u_r=_uniform(rng, (hid, hid), hid),
        b_r=np.zeros(hid),
        w_h=_uniform(rng, (in_dim, hid), in_dim),
        u_h=_uniform(rng, (hid, hid), hid),
        b_h=np.zeros(hid),
    )


def init_text_encoder(rng: np.random.Generator, vocab: int, word_dim: int, hid: int) -> TextEncoderParams:
    return TextEncoderParams(
        w_e=_uniform(rng, (vocab, word_dim), word_dim),
        fwd=init_gru_block(rng, word_dim, hid),
        bwd=init_gru_block(rng, word_dim, hid),
    )


# ---------------------------------------------------------------------------
# image side


def encode_image(regions: np.ndarray, params: ImageEncoderParams):
    """Project each region feature and normalize: one row per region."""
    regions = np.asarray(regions, dtype=np.float64)
    if regions.ndim != 2 or regions.shape[1] != params.w_f.shape[0]:
        raise ValueError(
            f"region features {regions.shape} do not match projection {params.w_f.shape}"
        )
    projected = regions @ params.w_f + params.b_f
    rows, norms = l2_normalize_rows(projected)
    return rows, (regions, rows, norms)


def encode_image_backward(d_rows: np.ndarray, cache, grads: dict) -> None:
    regions, rows, norms = cache
    d_proj = l2_normalize_rows_backward(rows, norms, d_rows)
    grads["image.w_f"] += regions.T @ d_proj
    grads["image.b_f"] += d_proj.sum(axis=0)


# ---------------------------------------------------------------------------
# text side


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh identity: stable at both extremes, no branching
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def gru_step(x: np.ndarray, h_prev: np.ndarray, block: GRUBlock) -> np.ndarray:
    """One recurrence step: h = (1 - z) * h_prev + z * candidate."""
    z = _sigmoid(x @ block.w_z + h_prev @ block.u_z + block.b_z)
    r = _sigmoid(x @ block.w_r + h_prev @ block.u_r + block.b_r)
    cand = np.tanh(x @ block.w_h + (r * h_prev) @ block.u_h + block.b_h)
    return (1.0 - z) * h_prev + z * cand


def _gru_scan(inputs: np.ndarray, block: GRUBlock):
    """Run the recurrence over a whole sequence, keeping per-step caches.

    Input-side affine terms are precomputed for all steps at once; only the
    recurrent terms stay inside the loop.
    """
    s, hid = inputs.shape[0], block.u_z.shape[0]
    ax_z = inputs @ block.w_z + block.b_z
    ax_r = inputs @ block.w_r + block.b_r
    ax_h = inputs @ block.w_h + block.b_h
    states = np.zeros((s, hid))
    steps = []
    h = np.zeros(hid)
    for t in range(s):
        z = _sigmoid(ax_z[t] + h @ block.u_z)
        r = _sigmoid(ax_r[t] + h @ block.u_r)
        cand = np.tanh(ax_h[t] + (r * h) @ block.u_h)
        h_new = (1.0 - z) * h + z * cand
        steps.append((h, z, r, cand))
        states[t] = h_new
        h = h_new
    return states, steps


def _gru_scan_backward(d_states: np.ndarray, inputs: np.ndarray, steps, block: GRUBlock, grads: dict, prefix: str):
    """Backprop through time; returns d(inputs) and accumulates into grads.

    The sequential loop only propagates the recurrent gradient; per-step
    pre-activation gradients are stacked so weight gradients reduce to a
    handful of whole-sequence matrix products.
    """
    s, hid = d_states.shape
    d_h = np.zeros(hid)
    pre_z = np.empty((s, hid))
    pre_r = np.empty((s, hid))
    pre_cand = np.empty((s, hid))
    prev_states = np.empty((s, hid))
    gated_prev = np.empty((s, hid))
    for t in range(s - 1, -1, -1):
        h_prev, z, r, cand = steps[t]
        prev_states[t] = h_prev
        gated_prev[t] = r * h_prev
        d_h = d_h + d_states[t]

        a_cand = (d_h * z) * (1.0 - cand * cand)
        d_gated = a_cand @ block.u_h.T
        a_z = (d_h * (cand - h_prev)) * z * (1.0 - z)
        a_r = (d_gated * h_prev) * r * (1.0 - r)
        pre_cand[t] = a_cand
        pre_z[t] = a_z
        pre_r[t] = a_r

        d_h = d_h * (1.0 - z) + d_gated * r + a_z @ block.u_z.T + a_r @ block.u_r.T

    g = {name: grads[f"{prefix}.{name}"] for name in vars(block)}
    g["w_z"] += inputs.T @ pre_z
    g["w_r"] += inputs.T @ pre_r
    g["w_h"] += inputs.T @ pre_cand
    g["u_z"] += prev_states.T @ pre_z
    g["u_r"] += prev_states.T @ pre_r
    g["u_h"] += gated_prev.T @ pre_cand
    g["b_z"] += pre_z.sum(axis=0)
    g["b_r"] += pre_r.sum(axis=0)
    g["b_h"] += pre_cand.sum(axis=0)
    return pre_z @ block.w_z.T + pre_r @ block.w_r.T + pre_cand @ block.w_h.T


def encode_text(tokens, params: TextEncoderParams):
    """Encode a token index sequence into one unit row per position.

    Two scans (left-to-right and right-to-left) are averaged per position,
    so every output row sees context from both sides.
    """
    tokens = list(tokens)
    if not tokens:
        raise ValueError("cannot encode an empty token sequence")
    vocab = params.w_e.shape[0]
    for tok in tokens:
        if not (0 <= tok < vocab):
            raise ValueError(f"token index {tok} outside vocabulary of size {vocab}")
    embedded = params.w_e[tokens]
    states_f, steps_f = _gru_scan(embedded, params.fwd)
    states_b_rev, steps_b = _gru_scan(embedded[::-1], params.bwd)
    averaged = 0.5 * (states_f + states_b_rev[::-1])
    rows, norms = l2_normalize_rows(averaged)
    return rows, (tokens, embedded, steps_f, steps_b, rows, norms)


def encode_text_backward(d_rows: np.ndarray, cache, params: TextEncoderParams, grads: dict) -> None:
    tokens, embedded, steps_f, steps_b, rows, norms = cache
    d_avg = l2_normalize_rows_backward(rows, norms, d_rows)
    d_states = 0.5 * d_avg
    d_emb = _gru_scan_backward(d_states, embedded, steps_f, params.fwd, grads, "text.fwd")
    d_emb_rev = _gru_scan_backward(d_states[::-1], embedded[::-1], steps_b, params.bwd, grads, "text.bwd")
    d_emb = d_emb + d_emb_rev[::-1]
    np.add.at(grads["text.w_e"], tokens, d_emb)
