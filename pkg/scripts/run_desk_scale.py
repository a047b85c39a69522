"""Desk-scale experiment: two-phase training over several seeds.

Generates the standard 160-image synthetic dataset (128 train / 32 test),
trains phase 1 and phase 2 for each seed, and reports train-gallery recall
after each phase.  The per-seed numbers feed the frozen regression bounds in
the acceptance suite.

    python3 scripts/run_desk_scale.py [--seeds 7 8 9 10 11] [--out DIR]
"""

import argparse
import json
import tempfile
import time
from pathlib import Path

from itmatch import dataio, evaluation, trainer
from itmatch.config import TrainConfig

DATASET_SEED = 2024


def train_gallery_report(state, dataset):
    images = dataset.splits["train"]
    captions = [j for i in images for j in dataset.image_to_captions[i]]
    img_emb, cap_emb = trainer.embed_all(state, dataset, images, captions)
    img_pos = {g: p for p, g in enumerate(images)}
    cap_pos = {g: p for p, g in enumerate(captions)}
    i2c = {img_pos[i]: {cap_pos[j] for j in dataset.image_to_captions[i]} for i in images}
    c2i = {cap_pos[j]: img_pos[dataset.caption_to_image[j]] for j in captions}
    return evaluation.recall_report(
        evaluation.rank_all(img_emb, cap_emb, evaluation.I2T),
        evaluation.rank_all(img_emb, cap_emb, evaluation.T2I),
        i2c,
        c2i,
    )


def run_seed(seed, dataset, out_dir):
    config = TrainConfig(seed=seed)
    t0 = time.time()
    state = trainer.run_phase1(config, dataset)
    phase1_time = time.time() - t0
    r1 = train_gallery_report(state, dataset)

    t0 = time.time()
    mined = trainer.mine_predictive(state, dataset, config)
    state = trainer.run_phase2(config, state, dataset, mined)
    phase2_time = time.time() - t0
    r2 = train_gallery_report(state, dataset)

    row = {
        "seed": seed,
        "phase1_seconds": round(phase1_time, 1),
        "phase2_seconds": round(phase2_time, 1),
        "phase1_t2i_r1": r1.t2i_r1,
        "phase1_r_sum": r1.r_sum,
        "phase2_r_sum": r2.r_sum,
    }
    print(
        f"seed {seed}: phase1 {phase1_time:5.1f}s  t2i_r1 {r1.t2i_r1:6.2f}  "
        f"r_sum {r1.r_sum:7.2f} -> phase2 {phase2_time:5.1f}s  r_sum {r2.r_sum:7.2f}"
    )
    return row


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, nargs="+", default=[7, 8, 9, 10, 11])
    parser.add_argument("--out", default=None, help="directory for dataset and results")
    args = parser.parse_args()

    out_dir = Path(args.out) if args.out else Path(tempfile.mkdtemp(prefix="deskscale-"))
    manifest = dataio.generate_synthetic(out_dir / "data", seed=DATASET_SEED, n_images=160, test_fraction=0.2)
    dataset = dataio.load_dataset(manifest)
    print(f"dataset: {len(dataset.splits['train'])} train / {len(dataset.splits['test'])} test images")

    rows = [run_seed(seed, dataset, out_dir) for seed in args.seeds]
    mean1 = sum(r["phase1_r_sum"] for r in rows) / len(rows)
    mean2 = sum(r["phase2_r_sum"] for r in rows) / len(rows)
    print(f"mean train r_sum: phase1 {mean1:.3f}  phase2 {mean2:.3f}  delta {mean2 - mean1:+.3f}")
    (out_dir / "results.json").write_text(json.dumps({"rows": rows, "mean_phase1": mean1, "mean_phase2": mean2}, indent=1))
    print(f"results: {out_dir / 'results.json'}")


if __name__ == "__main__":
    main()
