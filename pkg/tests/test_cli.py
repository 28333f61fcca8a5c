import json

import numpy as np
import pytest

from softtrack.cli import dump_top_visual, run
from softtrack.imaging import load_image
from softtrack.top_prior import top_argmax


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny dataset + prior cache + 3-step checkpoint, shared by CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data_dir = root / "data"
    assert run(
        [
            "gen-data", "--out", str(data_dir), "--seed", "3",
            "--videos", "3", "--frames", "4", "--size", "64",
        ]
    ) == 0
    cache = root / "cache"
    assert run(
        [
            "top", "--data", str(data_dir / "manifest.json"), "--cache", str(cache),
            "--seed", "1", "--n-random", "300", "--n-edge", "200",
        ]
    ) == 0
    out = root / "train"
    assert run(
        [
            "train", "--data", str(data_dir / "manifest.json"), "--cache", str(cache),
            "--out", str(out), "--seed", "0", "--steps", "3",
            "--videos-per-batch", "2", "--n-random", "300", "--n-edge", "200",
        ]
    ) == 0
    return root


class TestValidation:
    def test_no_subcommand_usage_exit_1(self, capsys):
        assert run([]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag_rejected(self):
        assert run(["cost", "--frobnicate"]) == 1

    def test_randomized_subcommand_requires_seed(self, tmp_path):
        assert run(["gen-data", "--out", str(tmp_path / "x")]) == 1

    def test_missing_file_is_runtime_failure(self, tmp_path):
        rc = run(["eval", "--data", str(tmp_path / "absent.json"), "--out", str(tmp_path / "m.json")])
        assert rc == 2


class TestCost:
    def test_prints_316(self, capsys):
        assert run(["cost", "--T", "10"]) == 0
        out = capsys.readouterr().out
        assert "10,3.16" in out
        assert "4.5x" in out

    def test_multiple_t(self, capsys):
        assert run(["cost", "--T", "1", "--T", "10", "--T", "100"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "T,cost_s"
        assert lines[1] == "1,10.30"
        assert lines[2] == "10,3.16"


class TestGradCheck:
    def test_clean_build_passes(self, capsys):
        assert run(["grad-check"]) == 0
        out = capsys.readouterr().out
        assert "conv2d" in out
        assert "worst:" in out


class TestPipelineArtifacts:
    def test_gen_data_artifacts(self, workspace):
        manifest = json.loads((workspace / "data" / "manifest.json").read_text())
        assert len(manifest["videos"]) == 3
        assert all(f["point"] is not None for v in manifest["videos"] for f in v["frames"])

    def test_top_cache_artifacts(self, workspace):
        tops = list((workspace / "cache").glob("*.top"))
        assert len(tops) == 12
        assert (workspace / "cache" / "index.json").exists()

    def test_train_artifacts_include_figure(self, workspace):
        out = workspace / "train"
        assert (out / "checkpoint.bin").exists()
        assert (out / "metrics.csv").exists()
        assert (out / "loss.png").exists()

    def test_track_and_eval(self, workspace, tmp_path):
        manifest = str(workspace / "data" / "manifest.json")
        ckpt = str(workspace / "train" / "checkpoint.bin")
        traj = tmp_path / "traj.jsonl"
        assert run(["track", "--data", manifest, "--ckpt", ckpt, "--video", "1",
                    "--out", str(traj)]) == 0
        rows = [json.loads(line) for line in traj.read_text().splitlines()]
        assert len(rows) == 4
        assert {"frame", "cx", "cy", "w", "h", "peak"} <= set(rows[0])

        metrics_path = tmp_path / "metrics.json"
        figs = tmp_path / "figs"
        assert run(["eval", "--data", manifest, "--ckpt", ckpt, "--out", str(metrics_path),
                    "--figures", str(figs)]) == 0
        metrics = json.loads(metrics_path.read_text())
        assert "precision@10" in metrics
        assert (figs / "precision_curve.png").exists()

    def test_pseudo_schema_and_top_modes(self, workspace, tmp_path):
        manifest = str(workspace / "data" / "manifest.json")
        ckpt = str(workspace / "train" / "checkpoint.bin")
        schema_out = tmp_path / "schema.jsonl"
        assert run(["pseudo", "--data", manifest, "--ckpt", ckpt, "--T", "2",
                    "--out", str(schema_out)]) == 0
        rows = [json.loads(line) for line in schema_out.read_text().splitlines()]
        assert len(rows) == 12
        assert all("corrected" in r for r in rows)

        top_out = tmp_path / "topboxes.jsonl"
        assert run(["pseudo", "--data", manifest, "--mode", "top",
                    "--cache", str(workspace / "cache"), "--alpha", "0.5",
                    "--out", str(top_out)]) == 0
        rows = [json.loads(line) for line in top_out.read_text().splitlines()]
        assert len(rows) == 12
        assert all(r["w"] > 0 and r["h"] > 0 for r in rows)

    def test_config_file_precedence(self, workspace, tmp_path, capsys):
        cfg = tmp_path / "cost.json"
        cfg.write_text(json.dumps({"T": [5]}))
        assert run(["cost", "--config", str(cfg)]) == 0
        out = capsys.readouterr().out
        assert "5,3.96" in out  # file value applied
        assert run(["cost", "--config", str(cfg), "--T", "10"]) == 0
        out = capsys.readouterr().out
        assert "10,3.16" in out  # explicit flag beats the file
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"unknown_key": 1}))
        assert run(["cost", "--config", str(bad)]) == 1


class TestAblate:
    def test_four_rows_monotone_modules_and_figure(self, workspace, tmp_path):
        manifest = str(workspace / "data" / "manifest.json")
        out = tmp_path / "ablation"
        rc = run(
            [
                "ablate", "--data", manifest, "--cache", str(workspace / "cache"),
                "--out", str(out), "--seed", "0", "--steps", "2",
                "--videos-per-batch", "2", "--n-random", "300", "--n-edge", "200",
            ]
        )
        assert rc == 0
        lines = (out / "ablation.csv").read_text().strip().splitlines()
        assert len(lines) == 5  # header + one row per configuration
        header = lines[0].split(",")
        rows = [dict(zip(header, line.split(","))) for line in lines[1:]]
        assert [r["mode"] for r in rows] == ["gst_only", "sns", "sns_mixup", "full"]
        # enabled-module annotation grows monotonically down the table
        masks = [tuple(int(r[k]) for k in ("gst", "sns", "mixup", "lst")) for r in rows]
        for a, b in zip(masks, masks[1:]):
            assert all(x <= y for x, y in zip(a, b))
        assert (out / "ablation.png").stat().st_size > 0


class TestDumpVisual:
    def test_uniform_map_constant_gray(self, tmp_path):
        path = tmp_path / "flat.pgm"
        dump_top_visual(np.full((8, 8), 1 / 64), path)
        img = load_image(path)
        assert np.all(img.pixels == 127)

    def test_one_hot_single_white_pixel(self, tmp_path):
        top = np.zeros((8, 8))
        top[2, 5] = 1.0
        path = tmp_path / "hot.pgm"
        dump_top_visual(top, path)
        img = load_image(path)
        assert img.pixels[2, 5] == 255
        assert img.pixels.sum() == 255

    def test_scaling_preserves_argmax(self, tmp_path):
        rng = np.random.default_rng(3)
        raw = rng.random((16, 16))
        top = raw / raw.sum()
        path = tmp_path / "map.pgm"
        dump_top_visual(top, path)
        img = load_image(path)
        assert top_argmax(img.pixels.astype(np.float64)) == top_argmax(top)
