import json
from pathlib import Path

import numpy as np
import pytest

from itmatch import dataio
from itmatch.cli import main
from itmatch.config import TrainConfig


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One tiny dataset plus a short two-phase training run, shared by the
    CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert (
        main(
            [
                "synth",
                "--out",
                str(data),
                "--seed",
                "21",
                "--n-images",
                "20",
                "--captions-per-image",
                "3",
                "--latent-dim",
                "8",
                "--vocab-size",
                "60",
                "--regions",
                "4",
                "--d-in",
                "24",
                "--corpus-dim",
                "12",
                "--concepts",
                "6",
                "--caption-length",
                "6",
                "--test-fraction",
                "0.2",
            ]
        )
        == 0
    )
    config = TrainConfig(
        seed=5,
        embed_dim=12,
        word_dim=12,
        batch_size=4,
        phase1_epochs=2,
        phase2_epochs=1,
        pool_images=8,
        pool_captions=24,
        top_k=3,
        top_q=5,
    )
    config_path = root / "config.json"
    config.to_json(config_path)
    run = root / "run"
    assert (
        main(
            [
                "train",
                "--data",
                str(data / "manifest.json"),
                "--out",
                str(run),
                "--config",
                str(config_path),
                "--phase",
                "both",
            ]
        )
        == 0
    )
    return root


class TestSynth:
    def test_manifest_written(self, workspace):
        manifest = json.loads((workspace / "data" / "manifest.json").read_text())
        assert manifest["regions_per_image"] == 4


class TestTrain:
    def test_outputs_exist(self, workspace):
        run = workspace / "run"
        assert (run / "phase1.ckpt").exists()
        assert (run / "phase2.ckpt").exists()
        assert (run / "mined.tsv").exists()
        metrics = (run / "metrics.tsv").read_text().splitlines()
        assert metrics[0].startswith("step\tphase\tloss")
        phases = {line.split("\t")[1] for line in metrics[1:]}
        assert phases == {"1", "2"}

    def test_phase2_requires_resume(self, workspace, tmp_path):
        code = main(
            [
                "train",
                "--data",
                str(workspace / "data" / "manifest.json"),
                "--out",
                str(tmp_path / "out"),
                "--phase",
                "2",
            ]
        )
        assert code == 4

    def test_resume_fingerprint_mismatch_rejected(self, workspace, tmp_path):
        other = tmp_path / "other"
        main(["synth", "--out", str(other), "--seed", "99", "--n-images", "6",
              "--captions-per-image", "2", "--latent-dim", "4", "--vocab-size", "30",
              "--regions", "2", "--d-in", "8", "--corpus-dim", "12", "--concepts", "4",
              "--caption-length", "4", "--test-fraction", "0.34"])
        code = main(
            [
                "train",
                "--data",
                str(other / "manifest.json"),
                "--out",
                str(tmp_path / "out"),
                "--phase",
                "2",
                "--resume",
                str(workspace / "run" / "phase1.ckpt"),
            ]
        )
        assert code == 4


class TestMine:
    def test_mined_file_schema(self, workspace):
        lines = (workspace / "run" / "mined.tsv").read_text().splitlines()
        assert lines[0] == "anchor_image\tanchor_caption\thard_caption\thard_image\thard_image_caption\thard_caption_image"
        assert len(lines) > 1
        records = dataio.load_captions(workspace / "data" / "captions.tsv")
        caption_owner = {r.caption_id: r.image_id for r in records}
        for line in lines[1:]:
            anchor_image, anchor_caption, hard_caption, hard_image, partner_caption, partner_image = line.split("\t")
            assert caption_owner[anchor_caption] == anchor_image
            assert caption_owner[hard_caption] != anchor_image
            assert hard_image != anchor_image
            assert caption_owner[partner_caption] == hard_image
            assert caption_owner[hard_caption] == partner_image

    def test_mine_command_writes_file(self, workspace, tmp_path):
        out = tmp_path / "mined.tsv"
        code = main(
            [
                "mine",
                "--data",
                str(workspace / "data" / "manifest.json"),
                "--checkpoint",
                str(workspace / "run" / "phase1.ckpt"),
                "--out",
                str(out),
            ]
        )
        assert code == 0
        assert out.read_text().splitlines()[0].startswith("anchor_image")


class TestEval:
    def test_eval_on_manifest_split(self, workspace, capsys):
        code = main(
            [
                "eval",
                "--checkpoint",
                str(workspace / "run" / "phase2.ckpt"),
                "--data",
                str(workspace / "data" / "manifest.json"),
                "--split",
                "train",
            ]
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "r_sum" in out
        assert "i2t" in out and "t2i" in out

    def test_eval_on_raw_files_matches_manifest(self, workspace, capsys, tmp_path):
        # restrict the raw files to the test split and compare to --data
        data = workspace / "data"
        manifest = json.loads((data / "manifest.json").read_text())
        test_ids = manifest["splits"]["test"]
        records = [r for r in dataio.load_captions(data / "captions.tsv") if r.image_id in test_ids]
        dataio.save_captions(tmp_path / "test_caps.tsv", records)
        flat = dataio.load_matrix(data / "features.bin")
        regions = manifest["regions_per_image"]
        rows = []
        for image_id in test_ids:
            i = manifest["image_ids"].index(image_id)
            rows.append(flat[i * regions : (i + 1) * regions])
        dataio.save_matrix(tmp_path / "test_feats.bin", np.vstack(rows), dataio.VERSION_F32)

        ckpt = str(workspace / "run" / "phase2.ckpt")
        assert main(["eval", "--checkpoint", ckpt, "--data", str(data / "manifest.json"), "--split", "test"]) == 0
        via_manifest = capsys.readouterr().out
        assert (
            main(
                [
                    "eval",
                    "--checkpoint",
                    ckpt,
                    "--features",
                    str(tmp_path / "test_feats.bin"),
                    "--captions",
                    str(tmp_path / "test_caps.tsv"),
                ]
            )
            == 0
        )
        via_raw = capsys.readouterr().out
        assert via_manifest == via_raw

    def test_rerank_flag_accepted(self, workspace, capsys):
        code = main(
            [
                "eval",
                "--checkpoint",
                str(workspace / "run" / "phase2.ckpt"),
                "--data",
                str(workspace / "data" / "manifest.json"),
                "--split",
                "train",
                "--rerank",
                "on",
                "--gamma",
                "0.7",
            ]
        )
        assert code == 0
        assert "r_sum" in capsys.readouterr().out

    def test_missing_gallery_is_validation_error(self, workspace):
        code = main(["eval", "--checkpoint", str(workspace / "run" / "phase1.ckpt")])
        assert code == 4


class TestQuery:
    def test_image_query_lists_captions(self, workspace, capsys):
        code = main(
            [
                "query",
                "--checkpoint",
                str(workspace / "run" / "phase2.ckpt"),
                "--data",
                str(workspace / "data" / "manifest.json"),
                "--split",
                "train",
                "--id",
                "img0000",
            ]
        )
        assert code == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0].startswith("query image img0000")
        assert len(out) == 6

    def test_caption_query_lists_images(self, workspace, capsys):
        code = main(
            [
                "query",
                "--checkpoint",
                str(workspace / "run" / "phase2.ckpt"),
                "--data",
                str(workspace / "data" / "manifest.json"),
                "--split",
                "train",
                "--id",
                "cap0000_1",
            ]
        )
        assert code == 0
        assert "top 5 images" in capsys.readouterr().out

    def test_unknown_id_is_validation_error(self, workspace):
        code = main(
            [
                "query",
                "--checkpoint",
                str(workspace / "run" / "phase2.ckpt"),
                "--data",
                str(workspace / "data" / "manifest.json"),
                "--id",
                "nope",
            ]
        )
        assert code == 4


class TestCiderCommand:
    def test_scores_tab_separated(self, workspace, capsys, tmp_path):
        data = workspace / "data"
        refs = data / "captions.tsv"
        records = dataio.load_captions(refs)
        dataio.save_captions(tmp_path / "cands.tsv", records[:3])
        code = main(
            [
                "cider",
                "--candidates",
                str(tmp_path / "cands.tsv"),
                "--references",
                str(refs),
                "--out",
                str(tmp_path / "scores.tsv"),
            ]
        )
        assert code == 0
        lines = (tmp_path / "scores.tsv").read_text().splitlines()
        assert len(lines) == 3
        for line in lines:
            parts = line.split("\t")
            assert len(parts) == 6
            float(parts[1])
            # 6 decimal places everywhere
            assert all("." in p and len(p.split(".")[1]) == 6 for p in parts[1:])

    def test_bad_file_gives_data_format_exit(self, tmp_path):
        bad = tmp_path / "bad.tsv"
        bad.write_text("no tabs here\n")
        code = main(["cider", "--candidates", str(bad), "--references", str(bad)])
        assert code == 3


class TestConfigFile:
    def test_unknown_keys_rejected(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"seed": 1, "bogus_key": 2}))
        with pytest.raises(ValueError, match="unknown config keys"):
            TrainConfig.from_json(path)

    def test_roundtrip(self, tmp_path):
        config = TrainConfig(seed=9, beta=5.0)
        path = tmp_path / "config.json"
        config.to_json(path)
        assert TrainConfig.from_json(path) == config

    def test_invalid_values_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=1).validate()
        with pytest.raises(ValueError):
            TrainConfig(prior_eta=1.5).validate()
        with pytest.raises(ValueError):
            TrainConfig(optimizer="adagrad").validate()
