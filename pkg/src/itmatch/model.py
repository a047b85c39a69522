"""Full embedding pipeline: encoders feeding the consensus heads.

One image: region rows -> pooled vector -> corpus attention -> gate ->
stacked final unit embedding.  One caption: token rows through the bi-GRU,
then the same head with the prior concept label mixed into attention.
The backward walks the whole chain, accumulating into one flat name-keyed
gradient dict so the optimizer can treat all parameters uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import consensus as cons
from . import encoders as enc


@dataclass
class ModelParams:
    image: enc.ImageEncoderParams
    text: enc.TextEncoderParams
    consensus: cons.ConsensusParams

    def named_arrays(self):
        yield from self.image.named_arrays("image")
        yield from self.text.named_arrays("text")
        yield from self.consensus.named_arrays("consensus")

    def flat(self) -> dict[str, np.ndarray]:
        return dict(self.named_arrays())


def init_model(
    rng: np.random.Generator,
    *,
    d_in: int,
    d: int,
    word_dim: int,
    vocab_size: int,
    lam: float,
    eta: float,
) -> ModelParams:
    return ModelParams(
        image=enc.init_image_encoder(rng, d_in, d),
        text=enc.init_text_encoder(rng, vocab_size, word_dim, d),
        consensus=cons.init_consensus(rng, d, lam, eta),
    )


def zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.named_arrays()}


def embed_image(regions: np.ndarray, params: ModelParams, corpus: cons.CorpusEmbedding):
    rows, enc_cache = enc.encode_image(regions, params.image)
    pooled, pool_cache = cons.self_attention_pool(rows, params.consensus.lam)
    attended, attend_cache = cons.image_corpus_attend(pooled, corpus, params.consensus)
    fused, fuse_cache = cons.gated_fuse(
        pooled, attended, params.consensus.gate_w_img, params.consensus.gate_b_img
    )
    final, stack_cache = cons.stack_final(pooled, attended, fused, params.consensus.stack_img)
    return final, (enc_cache, pool_cache, attend_cache, fuse_cache, stack_cache)


def embed_image_backward(d_final: np.ndarray, cache, params: ModelParams, grads: dict) -> None:
    enc_cache, pool_cache, attend_cache, fuse_cache, stack_cache = cache
    d_pooled, d_attended, d_fused = cons.stack_final_backward(
        d_final, stack_cache, grads, "consensus.stack_img"
    )
    d_pooled_f, d_attended_f = cons.gated_fuse_backward(
        d_fused, fuse_cache, grads, "consensus.gate_w_img", "consensus.gate_b_img"
    )
    d_pooled = d_pooled + d_pooled_f
    d_attended = d_attended + d_attended_f
    d_pooled += cons.corpus_attend_backward(
        d_attended, attend_cache, grads, "consensus.proj_query_img", "consensus.proj_corpus_img"
    )
    d_rows = cons.self_attention_pool_backward(d_pooled, pool_cache)
    enc.encode_image_backward(d_rows, enc_cache, grads)


def embed_caption(tokens, label: np.ndarray, params: ModelParams, corpus: cons.CorpusEmbedding, mixture: str = "prior"):
    rows, enc_cache = enc.encode_text(tokens, params.text)
    pooled, pool_cache = cons.self_attention_pool(rows, params.consensus.lam)
    attended, attend_cache = cons.caption_corpus_attend(pooled, corpus, label, params.consensus, mixture=mixture)
    fused, fuse_cache = cons.gated_fuse(
        pooled, attended, params.consensus.gate_w_txt, params.consensus.gate_b_txt
    )
    final, stack_cache = cons.stack_final(pooled, attended, fused, params.consensus.stack_txt)
    return final, (enc_cache, pool_cache, attend_cache, fuse_cache, stack_cache)


def embed_caption_backward(d_final: np.ndarray, cache, params: ModelParams, grads: dict) -> None:
    enc_cache, pool_cache, attend_cache, fuse_cache, stack_cache = cache
    d_pooled, d_attended, d_fused = cons.stack_final_backward(
        d_final, stack_cache, grads, "consensus.stack_txt"
    )
    d_pooled_f, d_attended_f = cons.gated_fuse_backward(
        d_fused, fuse_cache, grads, "consensus.gate_w_txt", "consensus.gate_b_txt"
    )
    d_pooled = d_pooled + d_pooled_f
    d_attended = d_attended + d_attended_f
    d_pooled += cons.corpus_attend_backward(
        d_attended, attend_cache, grads, "consensus.proj_query_txt", "consensus.proj_corpus_txt"
    )
    d_rows = cons.self_attention_pool_backward(d_pooled, pool_cache)
    enc.encode_text_backward(d_rows, enc_cache, params.text, grads)
