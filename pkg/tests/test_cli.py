"""CLI contract tests: exit codes, error envelopes, locking, artifacts.

A module-scoped tiny benchmark keeps the subcommand smoke tests cheap:
16x16 images, an 8x8 UV map, and a 1-layer decoder.
"""

import json
import os
import subprocess
import sys

import pytest
from click.testing import CliRunner

from meshsplat import load_dataset, load_f32, load_weights, read_ply
from meshsplat.cli import LOCK_NAME, _load_cfg, main

TINY_CONFIG = {
    "seed": 5,
    "uv_size": 8,
    "prior": {"embed_dim": 8, "group_latent": 4, "hidden_layers": 1,
              "hidden_width": 8, "lr": 0.005, "steps": 3},
    "adaptation": {"n_real": 2, "n_gen": 2, "stage1_steps": 2,
                   "stage2_steps": 2},
    "bench": {"image_size": 16, "uv_size": 8, "n_views": 2, "n_drivings": 1,
              "n_holdout": 1, "n_expressions": 4, "embed_dim": 8,
              "group_latent": 4, "hidden_layers": 1, "hidden_width": 8},
}


def run_cli(*args):
    return CliRunner().invoke(main, list(args))


def envelope(result):
    """Parse the machine-readable error JSON from stderr."""
    line = result.stderr.strip().splitlines()[-1]
    doc = json.loads(line)
    assert set(doc) == {"error"}
    assert set(doc["error"]) == {"code", "exit", "message"}
    return doc["error"]


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny benchmark + init weights shared by the subcommand tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = write_config(root / "run.json", TINY_CONFIG)
    bench = root / "bench"
    result = run_cli("make-bench", "--config", cfg_path,
                     "--out", str(bench))
    assert result.exit_code == 0, result.output
    init_dir = root / "init"
    result = run_cli("init", "--config", cfg_path,
                     "--dataset", str(bench / "train"),
                     "--out", str(init_dir))
    assert result.exit_code == 0, result.output
    return {"root": root, "config": cfg_path, "bench": bench,
            "train": bench / "train",
            "weights": init_dir / "init.mgpw"}


class TestErrorEnvelope:
    def test_missing_seed_key_exits_2(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", {"uv_size": 8})
        result = run_cli("make-bench", "--config", cfg,
                         "--out", str(tmp_path / "o"))
        assert result.exit_code == 2
        err = envelope(result)
        assert err["code"] == "config"
        assert err["exit"] == 2
        assert "seed" in err["message"]

    def test_missing_config_file_exits_2(self, tmp_path):
        result = run_cli("make-bench", "--config",
                         str(tmp_path / "missing.json"),
                         "--out", str(tmp_path / "o"))
        assert result.exit_code == 2
        assert envelope(result)["code"] == "config"

    def test_unknown_config_key_exits_2(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", {"seed": 0, "bogus": 1})
        result = run_cli("make-bench", "--config", cfg,
                         "--out", str(tmp_path / "o"))
        assert result.exit_code == 2
        assert "bogus" in envelope(result)["message"]

    def test_unknown_nested_key_exits_2(self, tmp_path):
        cfg = write_config(tmp_path / "c.json",
                           {"seed": 0, "renderer": {"warp": 9}})
        result = run_cli("make-bench", "--config", cfg,
                         "--out", str(tmp_path / "o"))
        assert result.exit_code == 2
        assert envelope(result)["code"] == "config"

    def test_no_output_dir_exits_2(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", {"seed": 0})
        result = run_cli("init", "--config", cfg,
                         "--dataset", str(tmp_path / "whatever"))
        assert result.exit_code == 2
        assert "output" in envelope(result)["message"]

    def test_missing_dataset_exits_3(self, workspace, tmp_path):
        result = run_cli("init", "--config", workspace["config"],
                         "--dataset", str(tmp_path / "nope"),
                         "--out", str(tmp_path / "o"))
        assert result.exit_code == 3
        assert envelope(result)["code"] == "missing_file"


class TestLocking:
    def test_live_pid_blocks_writer(self, workspace, tmp_path):
        out = tmp_path / "locked"
        out.mkdir()
        lock = out / LOCK_NAME
        lock.write_text(str(os.getpid()))
        result = run_cli("init", "--config", workspace["config"],
                         "--dataset", str(workspace["train"]),
                         "--out", str(out))
        assert result.exit_code == 3
        err = envelope(result)
        assert err["code"] == "lock"
        assert lock.exists(), "foreign lock must not be removed"

    def test_stale_dead_pid_is_replaced(self, workspace, tmp_path):
        proc = subprocess.Popen([sys.executable, "-c", ""])
        proc.wait()
        out = tmp_path / "stale"
        out.mkdir()
        (out / LOCK_NAME).write_text(str(proc.pid))
        result = run_cli("init", "--config", workspace["config"],
                         "--dataset", str(workspace["train"]),
                         "--out", str(out))
        assert result.exit_code == 0, result.output
        assert not (out / LOCK_NAME).exists()

    def test_garbage_lock_is_replaced(self, workspace, tmp_path):
        out = tmp_path / "garbage"
        out.mkdir()
        (out / LOCK_NAME).write_text("not-a-pid")
        result = run_cli("init", "--config", workspace["config"],
                         "--dataset", str(workspace["train"]),
                         "--out", str(out))
        assert result.exit_code == 0, result.output
        assert not (out / LOCK_NAME).exists()

    def test_lock_released_after_success(self, workspace):
        assert not (workspace["bench"] / LOCK_NAME).exists()


class TestDeterministicFlag:
    def test_forces_single_thread(self, tmp_path):
        cfg = write_config(tmp_path / "c.json",
                           {"seed": 0, "renderer": {"threads": 4}})
        assert _load_cfg(cfg, deterministic=True).renderer.threads == 1
        assert _load_cfg(cfg, deterministic=False).renderer.threads == 4


class TestSubcommands:
    def test_make_bench_artifacts(self, workspace):
        bench = workspace["bench"]
        manifest = json.loads((bench / "bench.json").read_text())
        assert manifest["n_train_frames"] == 2
        assert manifest["n_holdout_frames"] == 1
        assert (bench / "oracle.mgpw").exists()
        assert (bench / "oracle.gmap").exists()
        assert len(load_dataset(bench / "train")) == 2
        assert len(load_dataset(bench / "holdout")) == 1

    def test_init_weights_match_dataset(self, workspace):
        pcfg, weights = load_weights(workspace["weights"])
        assert pcfg.n_expressions == 4
        assert pcfg.embed_dim == 8

    def test_render_writes_pngs_and_raw(self, workspace, tmp_path):
        out = tmp_path / "renders"
        result = run_cli("render", "--config", workspace["config"],
                         "--dataset", str(workspace["train"]),
                         "--weights", str(workspace["weights"]),
                         "--out", str(out), "--frames", "0", "--raw")
        assert result.exit_code == 0, result.output
        assert (out / "render_000.png").exists()
        assert load_f32(out / "render_000.f32").shape == (16, 16, 3)
        assert not (out / "render_001.png").exists()

    def test_render_rejects_bad_frame_list(self, workspace, tmp_path):
        result = run_cli("render", "--config", workspace["config"],
                         "--dataset", str(workspace["train"]),
                         "--weights", str(workspace["weights"]),
                         "--out", str(tmp_path / "o"), "--frames", "0,x")
        assert result.exit_code == 3
        assert envelope(result)["code"] == "validation_error"
        result = run_cli("render", "--config", workspace["config"],
                         "--dataset", str(workspace["train"]),
                         "--weights", str(workspace["weights"]),
                         "--out", str(tmp_path / "o"), "--frames", "7")
        assert result.exit_code == 3

    def test_eval_writes_csv(self, workspace, tmp_path):
        out = tmp_path / "eval"
        result = run_cli("eval", "--config", workspace["config"],
                         "--dataset", str(workspace["train"]),
                         "--weights", str(workspace["weights"]),
                         "--out", str(out))
        assert result.exit_code == 0, result.output
        lines = (out / "eval.csv").read_text().strip().splitlines()
        assert lines[0] == "frame,psnr,ssim,l1"
        assert len(lines) == 4               # 2 frames + mean
        assert lines[-1].startswith("mean,")

    def test_animate_renders_sequence(self, workspace, tmp_path):
        out = tmp_path / "anim"
        result = run_cli("animate", "--config", workspace["config"],
                         "--dataset", str(workspace["train"]),
                         "--weights", str(workspace["weights"]),
                         "--out", str(out))
        assert result.exit_code == 0, result.output
        assert (out / "anim_000.png").exists()
        assert (out / "anim_001.png").exists()

    def test_animate_rejects_bad_camera(self, workspace, tmp_path):
        result = run_cli("animate", "--config", workspace["config"],
                         "--dataset", str(workspace["train"]),
                         "--weights", str(workspace["weights"]),
                         "--out", str(tmp_path / "o"),
                         "--camera-index", "99")
        assert result.exit_code == 3

    def test_export_ply(self, workspace, tmp_path):
        out_file = tmp_path / "head.ply"
        result = run_cli("export-ply", "--config", workspace["config"],
                         "--dataset", str(workspace["train"]),
                         "--weights", str(workspace["weights"]),
                         "--out", str(out_file))
        assert result.exit_code == 0, result.output
        fields = read_ply(out_file)
        n = len(fields["x"])
        assert 0 < n <= 64                   # 8x8 UV map, minus invalid
        assert set(fields) >= {"x", "y", "z", "opacity", "rot_0"}

    def test_adapt1_smoke(self, workspace, tmp_path):
        out = tmp_path / "a1"
        result = run_cli("adapt1", "--config", workspace["config"],
                         "--dataset", str(workspace["train"]),
                         "--weights", str(workspace["weights"]),
                         "--out", str(out))
        assert result.exit_code == 0, result.output
        assert (out / "adapted1.mgpw").exists()
        trace = json.loads((out / "adapt1.json").read_text())
        assert len(trace["loss"]) == 2
        assert len(trace["frames"]) == 2

    def test_gen_supervision_and_adapt2_smoke(self, workspace, tmp_path):
        gen = tmp_path / "gen"
        result = run_cli("gen-supervision", "--config", workspace["config"],
                         "--dataset", str(workspace["train"]),
                         "--weights", str(workspace["weights"]),
                         "--out", str(gen))
        assert result.exit_code == 0, result.output
        gen_ds = load_dataset(gen)
        assert len(gen_ds) == 2
        assert all(f.provenance == "generated" for f in gen_ds.frames)

        out = tmp_path / "a2"
        result = run_cli("adapt2", "--config", workspace["config"],
                         "--dataset", str(workspace["train"]),
                         "--gen", str(gen),
                         "--weights", str(workspace["weights"]),
                         "--out", str(out))
        assert result.exit_code == 0, result.output
        assert (out / "adapted2.mgpw").exists()
        report = json.loads((out / "adapt2.json").read_text())
        assert report["n_generated"] == 2
