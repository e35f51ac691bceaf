import csv
import json
from pathlib import Path

import numpy as np
import pytest

from rgsplat import tensor as T
from rgsplat.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny dataset plus a quickly trained stage-1/2 checkpoint."""
    root = tmp_path_factory.mktemp("cliws")
    data = root / "data"
    rc = main([
        "gen-data", str(data), "--count", "3", "--gt-gaussians", "80",
        "--input-views", "2", "--target-views", "1",
        "--height", "32", "--width", "48", "--seed", "5",
    ])
    assert rc == 0
    cfg = root / "config.json"
    cfg.write_text(json.dumps({
        "init": {"channels": 16, "context_blocks": 2, "k": 4},
        "recurrent": {"blocks": 1, "k": 4, "channels": 16},
        "loss": {"target_views": 1},
    }))
    ckpt1 = root / "stage1.ckpt"
    rc = main([
        "train-init", str(data), str(ckpt1), "--config", str(cfg),
        "--steps", "10", "--lr", "1e-3", "--seed", "1",
    ])
    assert rc == 0
    ckpt2 = root / "stage2.ckpt"
    rc = main([
        "train-recurrent", str(data), str(ckpt1), str(ckpt2),
        "--steps", "4", "--lr", "1e-3", "--seed", "2",
    ])
    assert rc == 0
    return root


def read_csv(path):
    lines = Path(path).read_text().splitlines()
    assert lines[0].startswith("# seed=")
    return list(csv.DictReader(lines[1:]))


class TestGenData:
    def test_scene_dirs_created(self, workspace):
        dirs = sorted((workspace / "data").iterdir())
        assert len(dirs) == 3
        for d in dirs:
            assert (d / "cameras.json").exists()

    def test_determinism_across_runs(self, tmp_path):
        for sub in ("a", "b"):
            assert main([
                "gen-data", str(tmp_path / sub), "--count", "1",
                "--gt-gaussians", "50", "--input-views", "2",
                "--target-views", "1", "--height", "16", "--width", "24",
                "--seed", "9",
            ]) == 0
        a = (tmp_path / "a" / "scene_0000" / "view_000.png").read_bytes()
        b = (tmp_path / "b" / "scene_0000" / "view_000.png").read_bytes()
        assert a == b


class TestTraining:
    def test_loss_logs_written_with_seed_header(self, workspace):
        rows = read_csv(workspace / "stage1.stage1.csv")
        assert rows and rows[0]["stage"] == "1"
        rows2 = read_csv(workspace / "stage2.stage2.csv")
        assert rows2 and rows2[0]["stage"] == "2"

    def test_stage2_requires_existing_stage1_checkpoint(self, workspace, capsys):
        rc = main([
            "train-recurrent", str(workspace / "data"),
            str(workspace / "missing.ckpt"), str(workspace / "out.ckpt"),
            "--steps", "1",
        ])
        assert rc == 1
        assert "exist" in capsys.readouterr().err


class TestInfer:
    def test_outputs_and_prefix_property(self, workspace, tmp_path):
        scene = sorted((workspace / "data").iterdir())[0]
        out0 = tmp_path / "t0"
        out3 = tmp_path / "t3"
        assert main(["infer", str(scene), str(workspace / "stage2.ckpt"),
                     str(out0), "--iterations", "0", "--seed", "3"]) == 0
        assert main(["infer", str(scene), str(workspace / "stage2.ckpt"),
                     str(out3), "--iterations", "2", "--seed", "3"]) == 0
        assert (out0 / "gaussians_t0.ply").read_bytes() == (
            out3 / "gaussians_t0.ply"
        ).read_bytes()
        assert (out0 / "render_t0_view0.png").read_bytes() == (
            out3 / "render_t0_view0.png"
        ).read_bytes()
        assert (out3 / "gaussians_t2.ply").exists()
        rows = read_csv(out3 / "metrics.csv")
        assert {r["iteration"] for r in rows} == {"0", "1", "2"}


class TestEval:
    def test_oracle_debug_scene_reports_high_psnr(self, workspace, tmp_path):
        scenes = [str(p) for p in sorted((workspace / "data").iterdir())]
        out = tmp_path / "eval.csv"
        assert main(["eval", *scenes, "--oracle-gaussians", "--out", str(out),
                     "--seed", "4"]) == 0
        rows = read_csv(out)
        assert len(rows) == 3
        for r in rows:
            assert float(r["psnr"]) >= 50.0
            assert int(r["gaussians"]) == 80

    def test_eval_reports_per_iteration_rows(self, workspace, tmp_path):
        scene = sorted((workspace / "data").iterdir())[0]
        out = tmp_path / "eval.csv"
        assert main(["eval", str(scene), "--checkpoint",
                     str(workspace / "stage2.ckpt"), "--iterations", "2",
                     "--out", str(out)]) == 0
        rows = read_csv(out)
        assert [r["iteration"] for r in rows] == ["0", "1", "2"]
        for r in rows:
            assert float(r["recon_time_s"]) >= 0
            assert float(r["render_time_s"]) > 0


class TestRender:
    def test_golden_ply_reproduces_golden_image(self, tmp_path):
        golden = Path(__file__).parent / "golden"
        cameras = {
            "seed": 0,
            "radius": 1.0,
            "views": [{
                "role": "target", "image": "unused.png",
                "fx": 24.0, "fy": 24.0, "cx": 12.0, "cy": 9.0,
                "width": 24, "height": 18,
                "R": np.eye(3).reshape(-1).tolist(), "t": [0.0, 0.0, 0.0],
            }],
        }
        cam_path = tmp_path / "cameras.json"
        cam_path.write_text(json.dumps(cameras))
        out = tmp_path / "renders"
        assert main(["render", str(golden / "one_gaussian.ply"), str(cam_path),
                     str(out)]) == 0
        img = np.load(out / "render_000.npy")
        expect = np.load(golden / "one_gaussian_render.npy")
        np.testing.assert_allclose(img, expect, atol=1e-6)

    def test_missing_ply_fails_cleanly(self, tmp_path, capsys):
        with pytest.raises(SystemExit):
            main(["render", str(tmp_path / "nope.ply"), str(tmp_path / "c.json"),
                  str(tmp_path / "out")])
