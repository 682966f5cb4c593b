"""End-to-end streaming runs: track a rendered stream, optionally tune prompts, evaluate."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import MODES, RunConfig, derive_seed
from .errors import DataError
from .evaluation import DEFAULT_MAX_DIST, evaluate_reconstruction
from .frontend import FrontendConfig, Tracker
from .geometry import Sim3
from .io import write_csv, write_ply, write_tum
from .predictor import Predictor, PromptSet
from .tuner import PromptTuner, TunerConfig
from .world import Intrinsics, RenderedFrame, generate_scene, loop_trajectory, make_stream

logger = logging.getLogger(__name__)

TUNER_CSV_HEADER = ["update_idx", "keyframe_id", "L_local", "L_global", "L_total"]


@dataclass
class RunResult:
    mode: str
    poses: list[Sim3]
    timestamps: np.ndarray
    frame_seconds: np.ndarray
    keyframe_frames: list[int]
    tuner_log: list = field(default_factory=list)
    forward_passes: int = 0
    tuning_passes: int = 0
    failures: list[dict] = field(default_factory=list)
    digest_before: str = ""
    digest_after: str = ""
    prompts: list[np.ndarray] = field(default_factory=list)
    keyframe_clouds: list[np.ndarray] = field(default_factory=list)

    @property
    def cloud(self) -> np.ndarray:
        return np.concatenate(self.keyframe_clouds, axis=0)

    @property
    def n_keyframes(self) -> int:
        return len(self.keyframe_frames)

    @property
    def mean_frame_seconds(self) -> float:
        return float(np.mean(self.frame_seconds))

    def manifest(self) -> dict:
        return {
            "mode": self.mode,
            "n_frames": len(self.poses),
            "n_keyframes": self.n_keyframes,
            "keyframe_frames": self.keyframe_frames,
            "mean_frame_seconds": self.mean_frame_seconds,
            "total_seconds": float(np.sum(self.frame_seconds)),
            "forward_passes": self.forward_passes,
            "tuning_forward_passes": self.tuning_passes,
            "prompt_updates": len(self.tuner_log),
            "tracking_failures": self.failures,
            "backbone_sha256_before": self.digest_before,
            "backbone_sha256_after": self.digest_after,
        }


def make_tuner_config(tcfg: TunerConfig, mode: str, seed: int) -> TunerConfig:
    """Copy of ``tcfg`` with the loss switches set for ``mode``."""
    from dataclasses import replace

    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    local, glob = MODES[mode]
    return replace(tcfg, enable_local=local, enable_global=glob, rng_seed=seed)


def run_stream(
    predictor: Predictor,
    frames: list[RenderedFrame],
    mode: str = "full",
    tuner_config: TunerConfig | None = None,
    frontend_config: FrontendConfig | None = None,
    seed: int = 0,
    prompts: PromptSet | None = None,
) -> RunResult:
    """Track ``frames`` in order; in tuning modes the prompts are updated at every new keyframe.

    The baseline keeps the initial (zero) prompts for the whole stream.
    """
    if not frames:
        raise DataError("empty stream")
    tcfg = make_tuner_config(tuner_config or TunerConfig(), mode, derive_seed(seed, "tuner"))
    tuner = PromptTuner(predictor, tcfg, prompts.copy() if prompts is not None else None)
    digest_before = predictor.digest()
    start_count = predictor.forward_count

    def predict(I, K):
        return predictor.predict(I, K, tuner.prompts)

    tracker = Tracker(
        predict,
        frontend_config or FrontendConfig(),
        seed=derive_seed(seed, "keyframe-buffer"),
        on_keyframe=tuner if tuner.active else None,
    )
    seconds = np.zeros(len(frames))
    for i, f in enumerate(frames):
        t0 = time.perf_counter()
        tracker.track(f.image)
        seconds[i] = time.perf_counter() - t0

    total_passes = predictor.forward_count - start_count
    return RunResult(
        mode=mode,
        poses=tracker.trajectory(),
        timestamps=np.array([f.timestamp for f in frames]),
        frame_seconds=seconds,
        keyframe_frames=[kf.creation_frame for kf in tracker.buffer],
        tuner_log=list(tuner.state.log),
        forward_passes=total_passes,
        tuning_passes=total_passes - len(frames),
        failures=tracker.failures,
        digest_before=digest_before,
        digest_after=predictor.digest(),
        prompts=tuner.prompts.arrays(),
        keyframe_clouds=[kf.world_points() for kf in tracker.buffer],
    )


def gt_cloud(frames: list[RenderedFrame], indices=None, stride: int = 10) -> np.ndarray:
    """Ray-cast surface points of the selected frames (default: every ``stride``-th frame)."""
    chosen = frames[::stride] if indices is None else [frames[i] for i in indices]
    return np.concatenate([f.world_points.reshape(-1, 3) for f in chosen], axis=0)


def evaluate_run(result: RunResult, frames: list[RenderedFrame], max_dist: float = DEFAULT_MAX_DIST,
                 outlier_mode: str = "discard") -> dict:
    """ATE over all frames; geometry against the exact surface seen by the run's keyframes."""
    gt_poses = [f.gt_pose for f in frames]
    reference = gt_cloud(frames, result.keyframe_frames)
    report = evaluate_reconstruction(result.poses, gt_poses, result.cloud, reference, max_dist, outlier_mode)
    report["mode"] = result.mode
    report["gt_cloud"] = {"source": "keyframe views", "frames": list(result.keyframe_frames)}
    return report


def build_stream(cfg: RunConfig, scene_seed: int | None = None) -> list[RenderedFrame]:
    w = cfg.world
    seed = w.scene_seed if scene_seed is None else scene_seed
    intr = Intrinsics(cfg.model.H, cfg.model.W)
    scene = generate_scene(seed, w.family)
    return make_stream(scene, loop_trajectory(seed, w.n_frames, w.revolutions), intr)


def write_run(out_dir, result: RunResult, report: dict | None, frames: list[RenderedFrame] | None = None,
              config: RunConfig | None = None) -> Path:
    """Trajectory (TUM), tuner log (CSV), keyframe cloud (PLY), run manifest and evaluation files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tum(out / "trajectory.tum", result.timestamps, result.poses, comment=f"mode {result.mode}")
    if frames is not None:
        write_tum(out / "groundtruth.tum", result.timestamps, [f.gt_pose for f in frames])
    write_csv(out / "tuner.csv", TUNER_CSV_HEADER,
              [[r.update_idx, r.keyframe_id, r.L_local, r.L_global, r.L_total] for r in result.tuner_log])
    write_ply(out / "cloud.ply", result.cloud)
    manifest = result.manifest()
    if config is not None:
        manifest["config"] = config.flat()
    (out / "run.json").write_text(json.dumps(manifest, indent=1))
    if report is not None:
        write_report(out, report)
    return out


def write_report(out_dir, report: dict) -> None:
    out = Path(out_dir)
    residuals = np.asarray(report.get("residuals", []))
    body = {k: v for k, v in report.items() if k != "residuals"}
    (out / "report.json").write_text(json.dumps(body, indent=1))
    write_csv(out / "residuals.csv", ["frame", "residual"], [[i, float(r)] for i, r in enumerate(residuals)])
