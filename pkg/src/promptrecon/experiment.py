"""Domain-shift study: pretrain on the base family, then track shifted streams in every mode."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .config import MODES, RunConfig, derive_seed
from .pipeline import build_stream, evaluate_run, run_stream
from .predictor import Predictor, pretrain

logger = logging.getLogger(__name__)

METRICS = ("ate", "acc", "comp", "chamfer")


@dataclass
class RunRecord:
    backbone_seed: int
    scene_seed: int
    mode: str
    ate: float
    acc: float
    comp: float
    chamfer: float
    n_keyframes: int
    frame_seconds: float
    prompt_updates: int


@dataclass
class ShiftStudy:
    records: list[RunRecord] = field(default_factory=list)
    pretrain_seconds: float = 0.0
    total_seconds: float = 0.0

    def select(self, mode: str) -> list[RunRecord]:
        return [r for r in self.records if r.mode == mode]

    def paired(self, mode: str, other: str = "baseline") -> list[tuple[RunRecord, RunRecord]]:
        ref = {(r.backbone_seed, r.scene_seed): r for r in self.select(other)}
        return [(r, ref[(r.backbone_seed, r.scene_seed)]) for r in self.select(mode)]

    def mean(self, mode: str, metric: str) -> float:
        return float(np.mean([getattr(r, metric) for r in self.select(mode)]))

    def wins(self, mode: str, other: str = "baseline") -> int:
        """Runs where ``mode`` has strictly lower Chamfer and ATE than ``other`` on the same stream."""
        return sum(r.chamfer < b.chamfer and r.ate < b.ate for r, b in self.paired(mode, other))

    def summary(self) -> dict:
        out = {}
        for mode in MODES:
            if self.select(mode):
                out[mode] = {m: self.mean(mode, m) for m in METRICS}
                out[mode]["frame_ms"] = 1000 * self.mean(mode, "frame_seconds")
                out[mode]["keyframes"] = self.mean(mode, "n_keyframes")
        return out


def pretrained_backbone(cfg: RunConfig, seed: int) -> Predictor:
    predictor = Predictor(cfg.model, seed=derive_seed(seed, "init"))
    pretrain(predictor, replace(cfg.pretrain, seed=seed), family="base", log_every=0)
    return predictor


def shift_study(
    cfg: RunConfig,
    backbone_seeds=(0, 1, 2),
    scene_seeds=(0, 1, 2, 3, 4),
    modes=tuple(MODES),
    backbones: dict[int, Predictor] | None = None,
) -> ShiftStudy:
    """Every (backbone, scene, mode) combination on ``cfg.world.family`` streams."""
    t0 = time.perf_counter()
    study = ShiftStudy()
    backbones = dict(backbones or {})
    for b in backbone_seeds:
        if b not in backbones:
            backbones[b] = pretrained_backbone(cfg, b)
            logger.info("backbone %d pretrained at %.0fs", b, time.perf_counter() - t0)
    study.pretrain_seconds = time.perf_counter() - t0
    streams = {s: build_stream(cfg, s) for s in scene_seeds}
    for b in backbone_seeds:
        for s in scene_seeds:
            for mode in modes:
                res = run_stream(backbones[b], streams[s], mode, cfg.tuner, cfg.frontend, seed=cfg.seed)
                rep = evaluate_run(res, streams[s])
                g = rep["geometry"]
                rec = RunRecord(b, s, mode, rep["trajectory"]["ate_rmse"], g["accuracy"], g["completion"],
                                g["chamfer"], res.n_keyframes, res.mean_frame_seconds, len(res.tuner_log))
                study.records.append(rec)
                logger.info("backbone %d scene %d %s: ATE %.4f Chamfer %.4f, %d keyframes, %.1f ms/frame",
                            b, s, mode, rec.ate, rec.chamfer, rec.n_keyframes, 1000 * rec.frame_seconds)
    study.total_seconds = time.perf_counter() - t0
    return study
