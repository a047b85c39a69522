from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from itmatch import mining
from itmatch.oracles import oracle_topk

DATA_DIR = Path(__file__).parent / "data"


def unit_rows(rng, n, d):
    m = rng.standard_normal((n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def make_pool(rng, n_images=5, caps_per_image=2, d=4):
    caption_to_image = {}
    image_to_captions = {}
    j = 0
    for i in range(n_images):
        image_to_captions[i] = []
        for _ in range(caps_per_image):
            caption_to_image[j] = i
            image_to_captions[i].append(j)
            j += 1
    return mining.PredictiveCandidates(
        image_emb=unit_rows(rng, n_images, d),
        caption_emb=unit_rows(rng, j, d),
        caption_to_image=caption_to_image,
        image_to_captions=image_to_captions,
    )


class TestBuildSimilarity:
    def test_identical_embedding_scores_one(self):
        v = np.array([[0.6, 0.8]])
        pool = mining.PredictiveCandidates(
            image_emb=v, caption_emb=v.copy(), caption_to_image={0: 0}, image_to_captions={0: [0]}
        )
        sim = mining.build_similarity(pool)
        np.testing.assert_allclose(sim.caption_vs_image, [[1.0]], atol=1e-12)

    def test_orthonormal_rows_off_diagonal_zero(self):
        eye = np.eye(3)
        pool = mining.PredictiveCandidates(
            image_emb=eye,
            caption_emb=eye.copy(),
            caption_to_image={0: 0, 1: 1, 2: 2},
            image_to_captions={0: [0], 1: [1], 2: [2]},
        )
        sim = mining.build_similarity(pool)
        np.testing.assert_allclose(sim.caption_vs_image, np.eye(3), atol=1e-12)

    def test_matches_bruteforce_dot_products(self):
        rng = np.random.default_rng(5)
        pool = make_pool(rng, n_images=2, caps_per_image=2, d=3)
        sim = mining.build_similarity(pool)
        for j in range(pool.num_captions):
            for i in range(pool.num_images):
                want = float(np.dot(pool.caption_emb[j], pool.image_emb[i]))
                assert sim.caption_vs_image[j, i] == pytest.approx(want, abs=1e-12)

    def test_transpose_relation(self):
        rng = np.random.default_rng(6)
        pool = make_pool(rng)
        sim = mining.build_similarity(pool)
        np.testing.assert_array_equal(sim.image_vs_caption, sim.caption_vs_image.T)

    def test_dim_mismatch(self):
        pool = make_pool(np.random.default_rng(0), n_images=2, caps_per_image=1, d=4)
        pool.image_emb = pool.image_emb[:, :3]
        with pytest.raises(ValueError):
            mining.build_similarity(pool)


class TestTopPositions:
    def test_own_captions_excluded(self):
        # image 0 owns captions 0 and 1; only the foreign caption 2 is eligible
        image_emb = np.array([[1.0, 0.0], [0.0, 1.0]])
        caption_emb = np.array([[1.0, 0.0], [0.96, 0.28], [0.6, 0.8]])
        pool = mining.PredictiveCandidates(
            image_emb=image_emb,
            caption_emb=caption_emb,
            caption_to_image={0: 0, 1: 0, 2: 1},
            image_to_captions={0: [0, 1], 1: [2]},
        )
        lists = mining.top_positions(mining.build_similarity(pool), pool, k=1, q=1)
        assert lists.captions_for_image[0] == [2]

    def test_ties_break_to_lowest_index(self):
        image_emb = np.eye(2)
        caption_emb = np.tile(np.array([[0.6, 0.8]]), (4, 1))
        pool = mining.PredictiveCandidates(
            image_emb=image_emb,
            caption_emb=caption_emb,
            caption_to_image={0: 0, 1: 0, 2: 1, 3: 1},
            image_to_captions={0: [0, 1], 1: [2, 3]},
        )
        lists = mining.top_positions(mining.build_similarity(pool), pool, k=2, q=1)
        assert lists.captions_for_image[0] == [2, 3]
        assert lists.captions_for_image[1] == [0, 1]
        assert lists.images_for_caption[0] == [1]

    def test_matches_oracle_on_5x10(self):
        rng = np.random.default_rng(42)
        pool = make_pool(rng, n_images=5, caps_per_image=2, d=6)
        sim = mining.build_similarity(pool)
        lists = mining.top_positions(sim, pool, k=3, q=2)
        exclusions = [set(pool.image_to_captions[i]) for i in range(5)]
        want = oracle_topk(sim.image_vs_caption.tolist(), 3, exclusions)
        assert lists.captions_for_image == want

    def test_k_too_large_reports_counts(self):
        rng = np.random.default_rng(1)
        pool = make_pool(rng, n_images=3, caps_per_image=2, d=4)
        with pytest.raises(ValueError, match="k=5 exceeds the 4"):
            mining.top_positions(mining.build_similarity(pool), pool, k=5, q=1)
        with pytest.raises(ValueError, match="q=3 exceeds the 2"):
            mining.top_positions(mining.build_similarity(pool), pool, k=1, q=3)

    @given(st.integers(0, 2**31 - 1), st.integers(2, 10), st.integers(1, 5))
    @settings(max_examples=30, deadline=None)
    def test_oracle_equivalence_random_instances(self, seed, n_images, k):
        rng = np.random.default_rng(seed)
        pool = make_pool(rng, n_images=n_images, caps_per_image=5, d=4)
        if k > (n_images - 1) * 5:
            return
        q = n_images - 1
        sim = mining.build_similarity(pool)
        lists = mining.top_positions(sim, pool, k=k, q=q)
        img_excl = [set(pool.image_to_captions[i]) for i in range(n_images)]
        cap_excl = [{pool.caption_to_image[j]} for j in range(pool.num_captions)]
        assert lists.captions_for_image == oracle_topk(sim.image_vs_caption.tolist(), k, img_excl)
        assert lists.images_for_caption == oracle_topk(sim.caption_vs_image.tolist(), q, cap_excl)

    def test_never_returns_ground_truth(self):
        rng = np.random.default_rng(17)
        for _ in range(10):
            pool = make_pool(rng, n_images=4, caps_per_image=3, d=4)
            lists = mining.top_positions(mining.build_similarity(pool), pool, k=4, q=3)
            for i in range(4):
                for j in lists.captions_for_image[i]:
                    assert pool.caption_to_image[j] != i
            for j in range(pool.num_captions):
                assert pool.caption_to_image[j] not in lists.images_for_caption[j]

    def test_topk_scores_dominate_excluded_candidates(self):
        rng = np.random.default_rng(23)
        pool = make_pool(rng, n_images=6, caps_per_image=2, d=5)
        sim = mining.build_similarity(pool)
        k = 3
        lists = mining.top_positions(sim, pool, k=k, q=2)
        for i in range(6):
            row = sim.image_vs_caption[i]
            chosen = lists.captions_for_image[i]
            rest = [
                j
                for j in range(pool.num_captions)
                if j not in chosen and pool.caption_to_image[j] != i
            ]
            if rest:
                assert min(row[j] for j in chosen) >= max(row[j] for j in rest) - 1e-12

    def test_golden_file(self):
        lines = (DATA_DIR / "topk_golden.tsv").read_text().strip().splitlines()
        for line in lines:
            i, values, banned, picks = line.split("\t")
            row = np.array([float(v) for v in values.split(",")])
            banned_set = {int(b) for b in banned.split(",")}
            want = [int(p) for p in picks.split(",")]
            assert mining._top_filtered(row, banned_set, 3) == want


class TestDrawQuadruple:
    def test_singleton_lists_no_freedom(self):
        rng = np.random.default_rng(2)
        pool = make_pool(rng, n_images=3, caps_per_image=2, d=4)
        lists = mining.top_positions(mining.build_similarity(pool), pool, k=1, q=1)
        quad = mining.draw_quadruple(lists, pool, 0, 0, rng=123)
        assert quad.hard_caption == lists.captions_for_image[0][0]
        assert quad.hard_image == lists.images_for_caption[0][0]

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(3)
        pool = make_pool(rng, n_images=5, caps_per_image=2, d=4)
        lists = mining.top_positions(mining.build_similarity(pool), pool, k=3, q=2)
        a = mining.draw_quadruple(lists, pool, 1, 2, rng=99)
        b = mining.draw_quadruple(lists, pool, 1, 2, rng=99)
        assert a == b

    def test_partners_are_true_pairs(self):
        rng = np.random.default_rng(4)
        pool = make_pool(rng, n_images=5, caps_per_image=2, d=4)
        lists = mining.top_positions(mining.build_similarity(pool), pool, k=3, q=2)
        for seed in range(20):
            quad = mining.draw_quadruple(lists, pool, 2, 4, rng=seed)
            assert pool.caption_to_image[quad.hard_caption] == quad.hard_caption_image
            assert quad.hard_image_caption in pool.image_to_captions[quad.hard_image]
            assert pool.caption_to_image[quad.hard_caption] != 2
            assert quad.hard_image != pool.caption_to_image[4]

    def test_draws_uniform_over_top_k(self):
        rng = np.random.default_rng(8)
        pool = make_pool(rng, n_images=20, caps_per_image=1, d=6)
        k = 5
        lists = mining.top_positions(mining.build_similarity(pool), pool, k=k, q=3)
        gen = np.random.default_rng(777)
        n_draws = 10_000
        counts = {}
        for _ in range(n_draws):
            quad = mining.draw_quadruple(lists, pool, 0, 0, rng=gen)
            counts[quad.hard_caption] = counts.get(quad.hard_caption, 0) + 1
        p = 1.0 / k
        sigma = np.sqrt(n_draws * p * (1 - p))
        for j in lists.captions_for_image[0]:
            assert abs(counts.get(j, 0) - n_draws * p) <= 3 * sigma

    def test_empty_list_rejected(self):
        rng = np.random.default_rng(9)
        pool = make_pool(rng, n_images=3, caps_per_image=2, d=4)
        lists = mining.top_positions(mining.build_similarity(pool), pool, k=1, q=1)
        lists.captions_for_image[0] = []
        with pytest.raises(ValueError):
            mining.draw_quadruple(lists, pool, 0, 0, rng=1)
