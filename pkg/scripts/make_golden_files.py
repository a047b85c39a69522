"""Regenerate the frozen expectation tables under tests/data/.

Expectations come from the brute-force reference implementations only, so
the main modules cannot influence their own test fixtures.  Run from the
repository root:

    python3 scripts/make_golden_files.py
"""

from pathlib import Path

import numpy as np

from itmatch.oracles import oracle_cider, oracle_recall, oracle_topk

DATA_DIR = Path(__file__).resolve().parent.parent / "tests" / "data"


def random_corpus(rng, n_images=4, max_caps=4, vocab=12, max_len=10):
    # mirrors the builder in tests/test_cider.py
    words = [f"w{i}" for i in range(vocab)]
    corpus = []
    for _ in range(n_images):
        caps = []
        for _ in range(rng.integers(2, max_caps + 1)):
            length = int(rng.integers(1, max_len + 1))
            caps.append([words[int(i)] for i in rng.integers(0, vocab, size=length)])
        corpus.append(caps)
    return corpus


def write_cider_golden():
    rng = np.random.default_rng(515)
    corpus = [random_corpus(rng, n_images=1)[0] for _ in range(6)]
    lines = []
    for img in range(6):
        for cand_img in range(6):
            score = oracle_cider(corpus[cand_img][0], corpus[img], corpus)
            lines.append(f"{img}\t{cand_img}\t{score:.12f}")
    (DATA_DIR / "cider_golden.tsv").write_text("\n".join(lines) + "\n")


def write_topk_golden():
    rng = np.random.default_rng(616)
    matrix = rng.uniform(-1, 1, size=(6, 9)).round(3)
    exclusions = [set(map(int, rng.choice(9, size=2, replace=False))) for _ in range(6)]
    lists = oracle_topk(matrix.tolist(), 3, exclusions)
    lines = []
    for i, row in enumerate(matrix):
        banned = ",".join(str(b) for b in sorted(exclusions[i]))
        picks = ",".join(str(p) for p in lists[i])
        values = ",".join(f"{v:.3f}" for v in row)
        lines.append(f"{i}\t{values}\t{banned}\t{picks}")
    (DATA_DIR / "topk_golden.tsv").write_text("\n".join(lines) + "\n")


def write_recall_golden():
    rng = np.random.default_rng(717)
    scores = rng.uniform(-1, 1, size=(8, 12)).round(3)
    truth = [{int(rng.integers(0, 12))} for _ in range(8)]
    recall = oracle_recall(scores.tolist(), truth, ks=(1, 5, 10))
    lines = []
    for i in range(8):
        values = ",".join(f"{v:.3f}" for v in scores[i])
        lines.append(f"{i}\t{values}\t{sorted(truth[i])[0]}")
    lines.append(f"recall\t{recall[1]:.6f}\t{recall[5]:.6f}\t{recall[10]:.6f}")
    (DATA_DIR / "recall_golden.tsv").write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    DATA_DIR.mkdir(parents=True, exist_ok=True)
    write_cider_golden()
    write_topk_golden()
    write_recall_golden()
    print(f"golden files written to {DATA_DIR}")
