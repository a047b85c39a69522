"""Command-line shell: synth, train, mine, eval, cider, query.

Exit codes: 0 success, 2 usage, 3 file-format errors, 4 manifest or
validation errors, 5 training divergence, 1 anything unexpected.  All
numeric output uses fixed decimal formatting so logs diff cleanly.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import cider as cider_mod
from . import dataio, evaluation, mining, model, trainer
from .config import TrainConfig
from .consensus import concept_label

EXIT_DATA_FORMAT = 3
EXIT_VALIDATION = 4
EXIT_DIVERGED = 5


def _log(args, message: str) -> None:
    if args.verbose:
        print(message, file=sys.stderr)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    seed = _seed_override(args)
    manifest = dataio.generate_synthetic(
        args.out,
        seed=seed if seed is not None else 0,
        n_images=args.n_images,
        captions_per_image=args.captions_per_image,
        latent_dim=args.latent_dim,
        noise_sigma=args.noise_sigma,
        vocab_size=args.vocab_size,
        regions_per_image=args.regions,
        d_in=args.d_in,
        corpus_dim=args.corpus_dim,
        n_concepts=args.concepts,
        caption_length=args.caption_length,
        val_fraction=args.val_fraction,
        test_fraction=args.test_fraction,
    )
    print(manifest)
    return 0


def _config_path(args):
    return getattr(args, "config", None) or getattr(args, "global_config", None)


def _seed_override(args):
    seed = getattr(args, "seed", None)
    return seed if seed is not None else getattr(args, "global_seed", None)


def _load_config(args) -> TrainConfig:
    path = _config_path(args)
    config = TrainConfig.from_json(path) if path else TrainConfig()
    seed = _seed_override(args)
    if seed is not None:
        config.seed = seed
    return config.validate()


def cmd_train(args) -> int:
    dataset = dataio.load_dataset(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = trainer.MetricsWriter(out_dir / "metrics.tsv")

    state = None
    if args.resume:
        state = trainer.load_checkpoint(args.resume)
        if state.dataset_fingerprint != dataset.fingerprint:
            raise ValueError(
                "checkpoint was trained on different data (fingerprint mismatch)"
            )
        config = state.config
        if _config_path(args):
            config = _load_config(args)
            state.config = config
        elif _seed_override(args) is not None:
            config.seed = _seed_override(args)
    else:
        config = _load_config(args)

    if args.phase in ("1", "both"):
        _log(args, f"phase 1: {config.phase1_epochs} epochs")
        state = trainer.run_phase1(config, dataset, metrics=metrics, state=state)
        trainer.save_checkpoint(out_dir / "phase1.ckpt", state)
        print(f"phase1 checkpoint: {out_dir / 'phase1.ckpt'}")
    if args.phase in ("2", "both"):
        if state is None:
            raise ValueError("phase 2 needs --resume with a phase-1 checkpoint")
        _log(args, "mining predictive candidates")
        mined = trainer.mine_predictive(state, dataset, config)
        write_mined_file(out_dir / "mined.tsv", mined, dataset, config)
        _log(args, f"phase 2: {config.phase2_epochs} epochs")
        state = trainer.run_phase2(config, state, dataset, mined, metrics=metrics)
        trainer.save_checkpoint(out_dir / "phase2.ckpt", state)
        print(f"phase2 checkpoint: {out_dir / 'phase2.ckpt'}")
    metrics.flush()
    print(f"metrics: {out_dir / 'metrics.tsv'}")
    return 0


def write_mined_file(path: Path, mined: trainer.MiningResult, dataset: dataio.Dataset, config: TrainConfig) -> None:
    """One record per anchor pair: ids of the drawn quadruple."""
    cands, lists = mined.candidates, mined.lists
    rng = np.random.default_rng([config.seed, 3, 0])
    rows = ["anchor_image\tanchor_caption\thard_caption\thard_image\thard_image_caption\thard_caption_image"]
    for cap_pos in range(cands.num_captions):
        img_pos = cands.caption_to_image[cap_pos]
        quad = mining.draw_quadruple(lists, cands, img_pos, cap_pos, rng)
        rows.append(
            "\t".join(
                [
                    dataset.image_ids[cands.image_ids[quad.anchor_image]],
                    dataset.captions[cands.caption_ids[quad.anchor_caption]].caption_id,
                    dataset.captions[cands.caption_ids[quad.hard_caption]].caption_id,
                    dataset.image_ids[cands.image_ids[quad.hard_image]],
                    dataset.captions[cands.caption_ids[quad.hard_image_caption]].caption_id,
                    dataset.image_ids[cands.image_ids[quad.hard_caption_image]],
                ]
            )
        )
    path.write_text("\n".join(rows) + "\n")


def cmd_mine(args) -> int:
    dataset = dataio.load_dataset(args.data)
    state = trainer.load_checkpoint(args.checkpoint)
    path = _config_path(args)
    config = TrainConfig.from_json(path) if path else state.config
    seed = _seed_override(args)
    if seed is not None:
        config.seed = seed

    if args.image_emb or args.caption_emb:
        if not (args.image_emb and args.caption_emb):
            raise ValueError("--image-emb and --caption-emb must be given together")
        pool_images, pool_captions = trainer.select_pool(config, dataset)
        train_images = dataset.splits["train"]
        train_captions = [j for i in train_images for j in dataset.image_to_captions[i]]
        image_rows = dataio.load_matrix(args.image_emb).astype(np.float64)
        caption_rows = dataio.load_matrix(args.caption_emb).astype(np.float64)
        if image_rows.shape[0] != len(train_images) or caption_rows.shape[0] != len(train_captions):
            raise ValueError(
                f"external embeddings must cover the train split: expected "
                f"{len(train_images)} image rows and {len(train_captions)} caption rows"
            )
        img_pos = {g: p for p, g in enumerate(train_images)}
        cap_pos = {g: p for p, g in enumerate(train_captions)}
        cands = trainer.build_candidates(
            image_rows[[img_pos[i] for i in pool_images]],
            caption_rows[[cap_pos[j] for j in pool_captions]],
            pool_images,
            pool_captions,
            dataset,
        )
        sim = mining.build_similarity(cands)
        lists = mining.top_positions(sim, cands, k=config.top_k, q=config.top_q)
        mined = trainer.MiningResult(candidates=cands, lists=lists)
    else:
        mined = trainer.mine_predictive(state, dataset, config)

    write_mined_file(Path(args.out), mined, dataset, config)
    print(args.out)
    return 0


def _eval_tables(dataset_like, state, rerank: bool, gamma: float):
    images, captions, image_to_captions, caption_to_image = dataset_like
    ranking_i2t = evaluation.rank_all(images, captions, evaluation.I2T)
    ranking_t2i = evaluation.rank_all(images, captions, evaluation.T2I)
    if rerank:
        ranking_i2t = evaluation.hybrid_rerank_i2t(ranking_i2t, ranking_t2i, gamma)
    return evaluation.recall_report(ranking_i2t, ranking_t2i, image_to_captions, caption_to_image)


def _gallery_from_manifest(args, state):
    dataset = dataio.load_dataset(args.data)
    split = args.split
    if split not in dataset.splits:
        raise ValueError(f"dataset has no split named {split}")
    image_indices = dataset.splits[split]
    caption_indices = [j for i in image_indices for j in dataset.image_to_captions[i]]
    images, captions = trainer.embed_all(state, dataset, image_indices, caption_indices)
    img_pos = {g: p for p, g in enumerate(image_indices)}
    cap_pos = {g: p for p, g in enumerate(caption_indices)}
    image_to_captions = {
        img_pos[i]: {cap_pos[j] for j in dataset.image_to_captions[i]} for i in image_indices
    }
    caption_to_image = {cap_pos[j]: img_pos[dataset.caption_to_image[j]] for j in caption_indices}
    image_ids = [dataset.image_ids[i] for i in image_indices]
    caption_ids = [dataset.captions[j].caption_id for j in caption_indices]
    caption_texts = [dataset.captions[j].text for j in caption_indices]
    return images, captions, image_to_captions, caption_to_image, image_ids, caption_ids, caption_texts


def _gallery_from_raw_files(args, state):
    """Raw feature + caption files: feature block order follows the first
    appearance of each image id in the caption file."""
    records = dataio.load_captions(args.captions)
    image_ids: list[str] = []
    seen = {}
    for record in records:
        if record.image_id not in seen:
            seen[record.image_id] = len(image_ids)
            image_ids.append(record.image_id)
    flat = dataio.load_matrix(args.features).astype(np.float64)
    regions = state.regions_per_image
    if flat.shape[0] != len(image_ids) * regions:
        raise ValueError(
            f"feature rows {flat.shape[0]} != {len(image_ids)} images x {regions} regions"
        )
    features = flat.reshape(len(image_ids), regions, flat.shape[1])
    token_index = {tok: k for k, tok in enumerate(state.vocabulary)}
    images = np.vstack(
        [model.embed_image(features[i], state.params, state.corpus)[0] for i in range(len(image_ids))]
    )
    caption_rows = []
    caption_to_image = {}
    image_to_captions = {i: set() for i in range(len(image_ids))}
    caption_ids = []
    caption_texts = []
    for p, record in enumerate(records):
        tokens = cider_mod.tokenize(record.text)
        unknown = [t for t in tokens if t not in token_index]
        if unknown:
            raise ValueError(f"caption {record.caption_id} uses unknown tokens: {unknown[:3]}")
        indices = [token_index[t] for t in tokens]
        label = concept_label(tokens, state.corpus.concept_vocab)
        caption_rows.append(
            model.embed_caption(indices, label, state.params, state.corpus, mixture=state.config.label_mixture)[0]
        )
        owner = seen[record.image_id]
        caption_to_image[p] = owner
        image_to_captions[owner].add(p)
        caption_ids.append(record.caption_id)
        caption_texts.append(record.text)
    return images, np.vstack(caption_rows), image_to_captions, caption_to_image, image_ids, caption_ids, caption_texts


def _load_gallery(args, state):
    if getattr(args, "data", None):
        return _gallery_from_manifest(args, state)
    if not (args.features and args.captions):
        raise ValueError("provide either --data MANIFEST or both --features and --captions")
    return _gallery_from_raw_files(args, state)


def cmd_eval(args) -> int:
    state = trainer.load_checkpoint(args.checkpoint)
    images, captions, i2c, c2i, *_ = _load_gallery(args, state)
    gamma = args.gamma if args.gamma is not None else state.config.rerank_gamma
    report = _eval_tables((images, captions, i2c, c2i), state, rerank=args.rerank == "on", gamma=gamma)
    lines = ["direction\tr1\tr5\tr10"]
    for direction, r1, r5, r10 in report.rows():
        lines.append(f"{direction}\t{r1:.1f}\t{r5:.1f}\t{r10:.1f}")
    lines.append(f"r_sum\t{report.r_sum:.1f}")
    output = "\n".join(lines)
    print(output)
    if args.out:
        Path(args.out).write_text(output + "\n")
    return 0


def cmd_query(args) -> int:
    state = trainer.load_checkpoint(args.checkpoint)
    images, captions, i2c, c2i, image_ids, caption_ids, caption_texts = _load_gallery(args, state)
    count = args.count
    if args.id in image_ids:
        q = image_ids.index(args.id)
        ranking = evaluation.rank_all(images, captions, evaluation.I2T)
        if args.rerank == "on":
            reverse = evaluation.rank_all(images, captions, evaluation.T2I)
            gamma = args.gamma if args.gamma is not None else state.config.rerank_gamma
            ranking = evaluation.hybrid_rerank_i2t(ranking, reverse, gamma)
        print(f"query image {args.id}: top {count} captions")
        for rank in range(min(count, ranking.order.shape[1])):
            j = int(ranking.order[q, rank])
            marker = "*" if j in i2c[q] else " "
            print(f"{rank + 1} {marker} {ranking.scores[q, rank]:.6f} {caption_ids[j]} {caption_texts[j]}")
    elif args.id in caption_ids:
        q = caption_ids.index(args.id)
        ranking = evaluation.rank_all(images, captions, evaluation.T2I)
        print(f"query caption {args.id}: top {count} images")
        for rank in range(min(count, ranking.order.shape[1])):
            i = int(ranking.order[q, rank])
            marker = "*" if c2i[q] == i else " "
            print(f"{rank + 1} {marker} {ranking.scores[q, rank]:.6f} {image_ids[i]}")
    else:
        raise ValueError(f"id {args.id} not found among image or caption ids")
    return 0


def cmd_cider(args) -> int:
    references = dataio.load_captions(args.references)
    candidates = dataio.load_captions(args.candidates)
    by_image: dict[str, list[list[str]]] = {}
    for record in references:
        by_image.setdefault(record.image_id, []).append(cider_mod.tokenize(record.text))
    idf = cider_mod.build_idf(list(by_image.values()))
    lines = []
    for record in candidates:
        if record.image_id not in by_image:
            raise ValueError(f"candidate {record.caption_id} has no references for image {record.image_id}")
        score = cider_mod.cider_score(cider_mod.tokenize(record.text), by_image[record.image_id], idf)
        per_n = "\t".join(f"{x:.6f}" for x in score.per_n)
        lines.append(f"{record.caption_id}\t{score.value:.6f}\t{per_n}")
    output = "\n".join(lines)
    print(output)
    if args.out:
        Path(args.out).write_text(output + "\n")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="itmatch", description=__doc__)
    parser.add_argument("--verbose", action="store_true", help="progress messages on stderr")
    parser.add_argument("--seed", type=int, default=None, dest="global_seed", help="seed override for any subcommand")
    parser.add_argument("--config", dest="global_config", help="JSON config file for any subcommand")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n-images", type=int, default=160)
    p.add_argument("--captions-per-image", type=int, default=5)
    p.add_argument("--latent-dim", type=int, default=16)
    p.add_argument("--noise-sigma", type=float, default=0.3)
    p.add_argument("--vocab-size", type=int, default=200)
    p.add_argument("--regions", type=int, default=8)
    p.add_argument("--d-in", type=int, default=64)
    p.add_argument("--corpus-dim", type=int, default=32)
    p.add_argument("--concepts", type=int, default=16)
    p.add_argument("--caption-length", type=int, default=8)
    p.add_argument("--val-fraction", type=float, default=0.0)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the two-phase training loop")
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--phase", choices=("1", "2", "both"), default="both")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("mine", help="mine hard negatives into a pairs file")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--image-emb", help="external image embedding matrix (train split order)")
    p.add_argument("--caption-emb", help="external caption embedding matrix (train split order)")
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("eval", help="recall metrics over a gallery")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset manifest (uses --split)")
    p.add_argument("--split", default="test")
    p.add_argument("--features", help="raw feature matrix (alternative to --data)")
    p.add_argument("--captions", help="raw caption file (alternative to --data)")
    p.add_argument("--rerank", choices=("on", "off"), default="off")
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("query", help="top matches for one image or caption id")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset manifest (uses --split)")
    p.add_argument("--split", default="test")
    p.add_argument("--features")
    p.add_argument("--captions")
    p.add_argument("--id", required=True)
    p.add_argument("--count", type=int, default=5)
    p.add_argument("--rerank", choices=("on", "off"), default="off")
    p.add_argument("--gamma", type=float, default=None)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("cider", help="score candidate captions against references")
    p.add_argument("--candidates", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_cider)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except dataio.DataFormatError as exc:
        print(f"error (data-format): {exc}", file=sys.stderr)
        return EXIT_DATA_FORMAT
    except dataio.ManifestError as exc:
        print(f"error (manifest): {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except trainer.TrainingDiverged as exc:
        print(f"error (diverged): {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"error (validation): {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # pragma: no cover - last resort
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
