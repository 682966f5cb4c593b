import csv
import json
import shutil

import numpy as np
import pytest

from promptrecon.cli import OUTPUT_ENV, main
from promptrecon.config import derive_seed, load_config
from promptrecon.io import read_ply, read_tum
from promptrecon.predictor import Predictor, load_checkpoint

TINY = """
model.H = 16
model.W = 16
model.D = 16
model.depth = 1
model.heads = 2
model.n_prompt = 2
model.head_hidden = 16
world.n_frames = 10
world.revolutions = 1.0
pretrain.batch = 2
pretrain.n_scenes = 2
pretrain.frames_per_scene = 12
pretrain.max_gap = 4
pretrain.warmup = 1
frontend.r_match = 1e-9
"""


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.toml"
    cfg.write_text(TINY)
    ck = root / "ck.bin"
    assert main(["pretrain", "--config", str(cfg), "--seed", "7", "--steps", "2", "--out", str(ck)]) == 0
    return root, cfg, ck


def rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_usage_errors_exit_1(tiny, capsys):
    root, cfg, ck = tiny
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["run", "--checkpoint", str(ck), "--mode", "turbo"])
    assert exc.value.code == 1
    assert main(["run", "--config", str(cfg), "--checkpoint", str(ck), "--set", "tuner.bogus=1"]) == 1
    assert main(["run", "--config", str(cfg), "--checkpoint", str(ck), "--set", "novalue"]) == 1


def test_data_errors_exit_2(tiny, tmp_path):
    root, cfg, ck = tiny
    assert main(["run", "--config", str(cfg), "--checkpoint", str(tmp_path / "missing.bin")]) == 2
    # checkpoint config mismatch
    assert main(["run", "--config", str(cfg), "--set", "model.D=32", "--checkpoint", str(ck)]) == 2
    assert main(["eval", str(tmp_path)]) == 2


def test_pretrain_zero_steps_is_initialization(tiny, tmp_path):
    root, cfg, _ = tiny
    out = tmp_path / "ck0.bin"
    assert main(["pretrain", "--config", str(cfg), "--seed", "7", "--steps", "0", "--out", str(out)]) == 0
    c = load_config(cfg)
    loaded, _ = load_checkpoint(out, c.model)
    init = Predictor(c.model, seed=derive_seed(7, "init"))
    for k, v in init.weights().items():
        np.testing.assert_array_equal(loaded.weights()[k], v)


def test_pretrain_is_byte_reproducible(tiny, tmp_path):
    root, cfg, ck = tiny
    again = tmp_path / "again.bin"
    assert main(["pretrain", "--config", str(cfg), "--seed", "7", "--steps", "2", "--out", str(again)]) == 0
    assert again.read_bytes() == ck.read_bytes()
    losses = rows(ck.with_name("pretrain_loss.csv"))
    assert losses[0] == ["step", "loss"] and len(losses) == 3


def test_output_root_from_environment(tiny, tmp_path, monkeypatch):
    root, cfg, _ = tiny
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    assert main(["pretrain", "--config", str(cfg), "--seed", "1", "--steps", "0"]) == 0
    assert (tmp_path / "env" / "pretrain_seed1" / "backbone.ckpt").exists()


@pytest.fixture(scope="module")
def full_run(tiny):
    root, cfg, ck = tiny
    out = root / "run_full"
    code = main(["run", "--config", str(cfg), "--checkpoint", str(ck), "--mode", "full",
                 "--out", str(out), "--export-stream", str(root / "stream")])
    assert code == 0
    return out


def test_run_outputs(full_run):
    man = json.loads((full_run / "run.json").read_text())
    n_kf = man["n_keyframes"]
    assert n_kf >= 3
    tuner = rows(full_run / "tuner.csv")
    assert tuner[0] == ["update_idx", "keyframe_id", "L_local", "L_global", "L_total"]
    assert len(tuner) - 1 == n_kf - 2
    assert len(list((full_run / "keyframes").glob("kf_*.ply"))) == n_kf
    ts, poses = read_tum(full_run / "trajectory.tum")
    assert len(poses) == man["n_frames"] == 10
    assert man["backbone_sha256_before"] == man["backbone_sha256_after"]
    assert man["mean_frame_seconds"] > 0
    assert "checkpoint_sha256" in man
    assert man["config"]["mode"] == "full"


def test_baseline_run_has_no_tuning(tiny):
    root, cfg, ck = tiny
    out = root / "run_base"
    assert main(["run", "--config", str(cfg), "--checkpoint", str(ck), "--mode", "baseline", "--out", str(out)]) == 0
    assert len(rows(out / "tuner.csv")) == 1
    assert json.loads((out / "run.json").read_text())["tuning_forward_passes"] == 0


def test_eval_report_consistency(full_run, tiny):
    root = tiny[0]
    out = root / "eval_out"
    assert main(["eval", str(full_run), "--gt-manifest", str(root / "stream" / "manifest.json"), "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    g = rep["geometry"]
    assert g["chamfer"] == pytest.approx(0.5 * (g["accuracy"] + g["completion"]), rel=1e-12)
    assert rows(out / "residuals.csv")[0] == ["frame", "residual"]


def test_eval_ground_truth_against_itself_is_zero(full_run, tiny, tmp_path):
    root = tiny[0]
    manifest = root / "stream" / "manifest.json"
    gt_dir = tmp_path / "gt"
    gt_dir.mkdir()
    shutil.copy(full_run / "groundtruth.tum", gt_dir / "trajectory.tum")
    assert main(["export-ply", "--stream", str(manifest), "--stride", "3", "--out", str(gt_dir / "cloud.ply")]) == 0
    assert main(["eval", str(gt_dir), "--gt-manifest", str(manifest), "--gt-stride", "3"]) == 0
    rep = json.loads((gt_dir / "report.json").read_text())
    assert rep["trajectory"]["ate_rmse"] == pytest.approx(0.0, abs=1e-12)
    for k in ("accuracy", "completion", "chamfer"):
        assert rep["geometry"][k] == pytest.approx(0.0, abs=1e-12)


def test_export_ply_ascii_and_binary_agree(full_run, tmp_path):
    assert main(["export-ply", "--input", str(full_run / "cloud.ply"), "--ascii", "--out", str(tmp_path / "a.ply")]) == 0
    assert main(["export-ply", "--input", str(tmp_path / "a.ply"), "--out", str(tmp_path / "b.ply")]) == 0
    np.testing.assert_allclose(read_ply(tmp_path / "b.ply"), read_ply(full_run / "cloud.ply"), rtol=1e-12)
    assert main(["export-ply", "--out", str(tmp_path / "c.ply")]) == 1


def test_ablate_table_is_reproducible(tiny):
    root, cfg, ck = tiny
    outs = []
    for k in range(2):
        out = root / f"ablate{k}"
        assert main(["ablate", "--config", str(cfg), "--checkpoint", str(ck), "--n-seeds", "1", "--out", str(out)]) == 0
        outs.append(out)
    table = rows(outs[0] / "ablation.csv")
    assert "Acc" in table[0]
    assert [r[0] for r in table[1:]] == ["Baseline", "Local*", "Global*", "Full*"]
    assert (outs[0] / "ablation.csv").read_bytes() == (outs[1] / "ablation.csv").read_bytes()


def test_eval_matches_standalone_recomputation(full_run, tiny, tmp_path):
    from promptrecon.evaluation import evaluate_reconstruction
    from promptrecon.pipeline import gt_cloud
    from promptrecon.world import load_stream

    root = tiny[0]
    manifest = root / "stream" / "manifest.json"
    assert main(["eval", str(full_run), "--gt-manifest", str(manifest), "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    frames, _ = load_stream(manifest)
    _, est = read_tum(full_run / "trajectory.tum")
    kf = json.loads((full_run / "run.json").read_text())["keyframe_frames"]
    again = evaluate_reconstruction(est, [f.gt_pose for f in frames], read_ply(full_run / "cloud.ply"), gt_cloud(frames, kf))
    assert rep["trajectory"]["ate_rmse"] == pytest.approx(again["trajectory"]["ate_rmse"], rel=1e-9, abs=1e-12)
    for k in ("accuracy", "completion", "chamfer"):
        assert rep["geometry"][k] == pytest.approx(again["geometry"][k], rel=1e-9, abs=1e-12)


def test_baseline_is_deterministic_and_ignores_tuner_settings(tiny):
    root, cfg, ck = tiny
    outs = []
    for k, extra in enumerate([[], [], ["--set", "tuner.lr=0.5", "--set", "tuner.lam=0.1"]]):
        out = root / f"base_det{k}"
        assert main(["run", "--config", str(cfg), "--checkpoint", str(ck), "--mode", "baseline", "--out", str(out), *extra]) == 0
        outs.append((out / "trajectory.tum").read_bytes())
    assert outs[0] == outs[1] == outs[2]
