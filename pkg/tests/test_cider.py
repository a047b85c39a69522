import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from itmatch import cider
from itmatch.oracles import oracle_cider

DATA_DIR = Path(__file__).parent / "data"


def random_corpus(rng, n_images=4, max_caps=4, vocab=12, max_len=10):
    words = [f"w{i}" for i in range(vocab)]
    corpus = []
    for _ in range(n_images):
        caps = []
        for _ in range(rng.integers(2, max_caps + 1)):
            length = int(rng.integers(1, max_len + 1))
            caps.append([words[int(i)] for i in rng.integers(0, vocab, size=length)])
        corpus.append(caps)
    return corpus


class TestTokenize:
    def test_lowercases_and_strips_punctuation(self):
        assert cider.tokenize("A dog, the Dog!") == ["a", "dog", "the", "dog"]

    def test_keeps_digits(self):
        assert cider.tokenize("room 101") == ["room", "101"]


class TestBuildIdf:
    def test_single_image_corpus_all_zero_idf(self):
        idf = cider.build_idf([[["a", "b", "c"]]])
        assert idf.corpus_size == 1
        for gram in [("a",), ("a", "b"), ("a", "b", "c")]:
            assert idf.idf(gram) == 0.0

    def test_ubiquitous_gram_zero_idf(self):
        corpus = [[["the", "dog"]], [["the", "cat"]], [["the", "bird"]]]
        idf = cider.build_idf(corpus)
        assert idf.idf(("the",)) == 0.0
        assert idf.idf(("dog",)) == pytest.approx(math.log(3.0))

    def test_hand_counted_four_image_corpus(self):
        corpus = [
            [["a", "b"], ["a", "c"]],
            [["a", "b"]],
            [["c", "d"]],
            [["d", "a"]],
        ]
        idf = cider.build_idf(corpus)
        # "a" appears in images 0, 1, 3 -> df 3; "a b" in 0, 1 -> df 2
        assert idf.idf(("a",)) == pytest.approx(math.log(4 / 3))
        assert idf.idf(("a", "b")) == pytest.approx(math.log(4 / 2))
        assert idf.idf(("c",)) == pytest.approx(math.log(4 / 2))
        # unseen grams fall back to df = 1
        assert idf.idf(("zzz",)) == pytest.approx(math.log(4.0))

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            cider.build_idf([])


class TestCiderScore:
    def test_identity_scores_ten(self):
        # distinct images so every gram of image 0 has idf > 0
        corpus = [
            [["a", "b", "c", "d", "e"]],
            [["f", "g", "h", "i"]],
        ]
        idf = cider.build_idf(corpus)
        score = cider.cider_score(["a", "b", "c", "d", "e"], corpus[0], idf)
        assert score.value == pytest.approx(10.0, abs=1e-12)
        assert score.per_n == pytest.approx((1.0, 1.0, 1.0, 1.0))

    def test_disjoint_tokens_score_zero(self):
        corpus = [[["a", "b", "c"]], [["d", "e", "f"]]]
        idf = cider.build_idf(corpus)
        score = cider.cider_score(["x", "y", "z"], corpus[0], idf)
        assert score.value == 0.0

    def test_short_candidate_higher_orders_zero(self):
        corpus = [[["a", "b", "c", "d"]], [["e", "f", "g", "h"]]]
        idf = cider.build_idf(corpus)
        score = cider.cider_score(["a"], corpus[0], idf)
        assert score.per_n[1] == 0.0
        assert score.per_n[2] == 0.0
        assert score.per_n[3] == 0.0

    def test_three_caption_toy_matches_oracle(self):
        corpus = [
            [["a", "dog", "runs"], ["the", "dog", "runs", "fast"]],
            [["a", "cat", "sits"]],
            [["the", "bird", "flies", "fast"]],
        ]
        idf = cider.build_idf(corpus)
        candidate = ["the", "dog", "runs"]
        got = cider.cider_score(candidate, corpus[0], idf)
        want = oracle_cider(candidate, corpus[0], corpus)
        assert got.value == pytest.approx(want, abs=1e-9)

    def test_no_references_rejected(self):
        idf = cider.build_idf([[["a"]]])
        with pytest.raises(ValueError):
            cider.cider_score(["a"], [], idf)

    def test_empty_candidate_rejected(self):
        idf = cider.build_idf([[["a"]]])
        with pytest.raises(ValueError):
            cider.cider_score([], [["a"]], idf)

    def test_thirty_random_corpora_match_oracle(self):
        rng = np.random.default_rng(2024)
        for _ in range(30):
            corpus = random_corpus(rng)
            idf = cider.build_idf(corpus)
            image = int(rng.integers(0, len(corpus)))
            refs = corpus[image]
            candidate = corpus[int(rng.integers(0, len(corpus)))][0]
            got = cider.cider_score(candidate, refs, idf).value
            want = oracle_cider(candidate, refs, corpus)
            assert got == pytest.approx(want, abs=1e-9)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_reference_order_invariance(self, seed):
        rng = np.random.default_rng(seed)
        corpus = random_corpus(rng, n_images=3)
        idf = cider.build_idf(corpus)
        refs = corpus[0]
        candidate = corpus[1][0]
        base = cider.cider_score(candidate, refs, idf).value
        shuffled = list(refs)
        rng.shuffle(shuffled)
        assert cider.cider_score(candidate, shuffled, idf).value == pytest.approx(base, abs=1e-12)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_nonnegative_and_zero_iff_disjoint(self, seed):
        rng = np.random.default_rng(seed)
        corpus = random_corpus(rng, n_images=3)
        idf = cider.build_idf(corpus)
        candidate = corpus[0][0]
        score = cider.cider_score(candidate, corpus[1], idf)
        assert score.value >= 0.0

    def test_appending_identical_reference_never_decreases(self):
        rng = np.random.default_rng(99)
        for _ in range(10):
            corpus = random_corpus(rng, n_images=3)
            idf = cider.build_idf(corpus)
            candidate = corpus[0][0]
            refs = corpus[1]
            before = cider.cider_score(candidate, refs, idf).value
            after = cider.cider_score(candidate, list(refs) + [list(candidate)], idf).value
            assert after >= before - 1e-12

    def test_golden_values(self):
        idf = None
        corpus = []
        rng = np.random.default_rng(515)
        for _ in range(6):
            corpus.append(random_corpus(rng, n_images=1)[0])
        idf = cider.build_idf(corpus)
        golden = (DATA_DIR / "cider_golden.tsv").read_text().strip().splitlines()
        for line in golden:
            img, cand_img, expected = line.split("\t")
            candidate = corpus[int(cand_img)][0]
            got = cider.cider_score(candidate, corpus[int(img)], idf).value
            assert got == pytest.approx(float(expected), abs=1e-9)


class TestAdaptiveMargins:
    def make_corpus(self):
        return [
            [["a", "dog", "runs", "fast"], ["the", "dog", "runs"], ["dog", "runs", "outside"]],
            [["a", "cat", "sits", "down"], ["the", "cat", "sits"]],
            [["a", "bird", "flies", "high"]],
        ]

    def test_equal_relevance_gives_zero_margin(self):
        corpus = self.make_corpus()
        idf = cider.build_idf(corpus)
        gt = corpus[0]
        margins = cider.adaptive_margins(gt, gt[0], gt[0], gt[0], idf, beta=1.0)
        assert margins.delta_v == 0.0
        assert margins.delta_t == 0.0

    def test_gap_divided_by_beta(self):
        corpus = self.make_corpus()
        idf = cider.build_idf(corpus)
        gt = corpus[0]
        pos, neg, partner = gt[0], corpus[1][0], corpus[2][0]
        phi_pos = oracle_cider(pos, [r for r in gt if r != pos], corpus)
        phi_neg = oracle_cider(neg, gt, corpus)
        phi_partner = oracle_cider(partner, gt, corpus)
        beta = 10.0
        margins = cider.adaptive_margins(gt, pos, neg, partner, idf, beta=beta)
        assert margins.delta_v == pytest.approx(max((phi_pos - phi_neg) / beta, 0.0), abs=1e-9)
        assert margins.delta_t == pytest.approx(max((phi_pos - phi_partner) / beta, 0.0), abs=1e-9)

    def test_scalar_formula(self):
        # delta = (0.8 - 0.3) / 1 = 0.5, straight from the definition
        assert max(min((0.8 - 0.3) / 1.0, 1.0), 0.0) == 0.5
        corpus = self.make_corpus()
        idf = cider.build_idf(corpus)
        gt = corpus[0]
        m = cider.adaptive_margins(gt, gt[0], corpus[1][0], corpus[1][0], idf, beta=1.0)
        phi_pos = cider.relevance(gt, gt[0], idf)
        phi_neg = cider.relevance(gt, corpus[1][0], idf)
        assert m.delta_v == pytest.approx(min(max((phi_pos - phi_neg) / 1.0, 0.0), 1.0), abs=1e-12)

    def test_more_relevant_negative_clamps_to_zero(self):
        corpus = self.make_corpus()
        idf = cider.build_idf(corpus)
        gt = corpus[0]
        # negative identical to another ground-truth caption outranks the
        # weakly related positive
        margins = cider.adaptive_margins(gt, corpus[2][0], gt[1], gt[1], idf, beta=1.0)
        assert margins.delta_v == 0.0
        assert margins.delta_t == 0.0

    def test_margins_clamped_to_delta_max(self):
        corpus = self.make_corpus()
        idf = cider.build_idf(corpus)
        gt = corpus[0]
        margins = cider.adaptive_margins(gt, gt[0], corpus[1][0], corpus[1][0], idf, beta=0.001, delta_max=1.0)
        assert margins.delta_v == 1.0

    def test_leave_one_out_requires_remaining_reference(self):
        corpus = [[["a", "b"]], [["c", "d"]]]
        idf = cider.build_idf(corpus)
        with pytest.raises(ValueError):
            cider.relevance(corpus[0], ["a", "b"], idf)

    def test_candidate_never_its_own_reference(self):
        corpus = self.make_corpus()
        idf = cider.build_idf(corpus)
        gt = corpus[0]
        # identity would score 10.0 against itself; leave-one-out must not
        phi = cider.relevance(gt, gt[0], idf)
        assert phi < 10.0

    def test_beta_must_be_positive(self):
        corpus = self.make_corpus()
        idf = cider.build_idf(corpus)
        with pytest.raises(ValueError):
            cider.adaptive_margins(corpus[0], corpus[0][0], corpus[1][0], corpus[1][0], idf, beta=0.0)
