"""Streaming tracker: relative pose, running fusion and keyframe selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol

import numpy as np

from .errors import DataError, DegenerateGeometryError
from .geometry import Sim3, umeyama
from .predictor import PredictionPair

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Keyframe:
    id: int
    image: np.ndarray
    X_canon: np.ndarray  # (H, W, 3) in the keyframe camera
    C_canon: np.ndarray  # (H, W) accumulated confidence
    pose_world: Sim3  # keyframe camera -> world
    creation_frame: int
    n_fused: int = 0

    def world_points(self) -> np.ndarray:
        return self.pose_world.apply(self.X_canon.reshape(-1, 3))


class KeyframeBuffer:
    """Ordered keyframes plus the seeded random source used for history sampling."""

    def __init__(self, seed: int = 0):
        self._frames: list[Keyframe] = []
        self.rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self._frames)

    def __getitem__(self, i) -> Keyframe:
        return self._frames[i]

    def __iter__(self):
        return iter(self._frames)

    @property
    def latest(self) -> Keyframe:
        return self._frames[-1]

    def append(self, kf: Keyframe) -> None:
        if self._frames and kf.id <= self._frames[-1].id:
            raise DataError(f"keyframe ids must increase: {kf.id} after {self._frames[-1].id}")
        self._frames.append(kf)

    def replace_latest(self, kf: Keyframe) -> None:
        if kf.id != self._frames[-1].id:
            raise DataError("replace_latest must keep the keyframe id")
        self._frames[-1] = kf

    def by_id(self, kf_id: int) -> Keyframe:
        for kf in self._frames:
            if kf.id == kf_id:
                return kf
        raise KeyError(kf_id)

    def ids(self) -> list[int]:
        return [kf.id for kf in self._frames]


def estimate_pose(
    X_canon: np.ndarray,
    X_cross: np.ndarray,
    C: np.ndarray,
    huber_iters: int = 0,
    huber_delta: float = 0.1,
) -> Sim3:
    """Sim(3) taking ``X_cross`` onto ``X_canon`` under per-pixel weights ``C``.

    Closed form (weighted Umeyama).  ``huber_iters > 0`` adds IRLS passes with
    Huber weights on the residual norm.
    """
    X_canon = np.asarray(X_canon, dtype=np.float64)
    X_cross = np.asarray(X_cross, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    if X_canon.shape != X_cross.shape or X_canon.shape[:-1] != C.shape:
        raise DataError(f"map extents differ: {X_canon.shape}, {X_cross.shape}, {C.shape}")
    T = umeyama(X_cross, X_canon, C)
    for _ in range(huber_iters):
        r = np.linalg.norm(X_canon - T.apply(X_cross), axis=-1)
        hub = np.where(r <= huber_delta, 1.0, huber_delta / np.maximum(r, 1e-300))
        T = umeyama(X_cross, X_canon, C * hub)
    return T


def fuse(kf: Keyframe, X_cross: np.ndarray, C_cross: np.ndarray, T_lt: Sim3) -> Keyframe:
    """Running confidence-weighted average of the keyframe's canonical pointmap."""
    if not T_lt.is_finite():
        raise DataError("non-finite relative pose")
    if not (np.all(np.isfinite(X_cross)) and np.all(np.isfinite(C_cross))):
        raise DataError("non-finite observation passed to fusion")
    X_obs = T_lt.apply(X_cross)
    Cc = kf.C_canon[..., None]
    Co = C_cross[..., None]
    X_new = (Cc * kf.X_canon + Co * X_obs) / (Cc + Co)
    return replace(kf, X_canon=X_new, C_canon=kf.C_canon + C_cross, n_fused=kf.n_fused + 1)


def match_ratio(pred: PredictionPair, kf: Keyframe, T_lt: Sim3, c_min: float, r_match: float) -> float:
    """Fraction of keyframe pixels that are confidently predicted and land near the canonical map."""
    resid = np.linalg.norm(kf.X_canon - T_lt.apply(pred.X_cross), axis=-1)
    valid = (pred.C_cross > c_min) & (resid < r_match)
    return float(valid.mean())


def is_keyframe(pred: PredictionPair, kf: Keyframe, T_lt: Sim3, tau_kf: float, c_min: float = 1.5, r_match: float = 0.05) -> bool:
    if not 0.0 < tau_kf < 1.0:
        raise DataError(f"tau_kf must be in (0, 1), got {tau_kf}")
    return match_ratio(pred, kf, T_lt, c_min, r_match) < tau_kf


@dataclass
class FrontendConfig:
    tau_kf: float = 0.7
    c_min: float = 1.5
    r_match: float = 0.05
    huber_iters: int = 0
    huber_delta: float = 0.1
    confident_pose: bool = True  # restrict pose weights to pixels with C > c_min
    min_confident: int = 16


@dataclass
class TrackResult:
    frame_index: int
    T_world: Sim3
    is_new_keyframe: bool
    match_ratio: float = 1.0
    fallback: bool = False


class PairPredictor(Protocol):
    def __call__(self, I: np.ndarray, K: np.ndarray) -> PredictionPair: ...


KeyframeHook = Callable[[Keyframe, Keyframe, KeyframeBuffer], None]


@dataclass
class Tracker:
    """Single-stream tracking state machine.

    ``predict(I, K)`` must return numpy prediction maps; ``on_keyframe`` is
    called after a new keyframe is appended, with (new, previous, buffer).
    """

    predict: PairPredictor
    config: FrontendConfig = field(default_factory=FrontendConfig)
    seed: int = 0
    on_keyframe: KeyframeHook | None = None

    def __post_init__(self):
        self.buffer = KeyframeBuffer(self.seed)
        self.results: list[TrackResult] = []
        self.failures: list[dict] = []
        self._last_world: Sim3 | None = None
        self._velocity = Sim3.identity()
        self._n = 0

    @property
    def initialized(self) -> bool:
        return len(self.buffer) > 0

    def _pose_weights(self, C: np.ndarray) -> np.ndarray:
        if not self.config.confident_pose:
            return C
        mask = C > self.config.c_min
        if mask.sum() < self.config.min_confident:
            return C
        return np.where(mask, C, 0.0)

    def _initialize(self, image: np.ndarray) -> TrackResult:
        pred = self.predict(image, image)
        kf = Keyframe(0, image, pred.X_self.copy(), pred.C_self.copy(), Sim3.identity(), 0)
        self.buffer.append(kf)
        self._last_world = kf.pose_world
        res = TrackResult(0, kf.pose_world, True)
        self.results.append(res)
        self._n = 1
        return res

    def track(self, image: np.ndarray) -> TrackResult:
        if not self.initialized:
            return self._initialize(image)
        t = self._n
        kf = self.buffer.latest
        pred = self.predict(image, kf.image)
        fallback = False
        try:
            T_lt = estimate_pose(
                kf.X_canon, pred.X_cross, self._pose_weights(pred.C_cross),
                self.config.huber_iters, self.config.huber_delta,
            )
        except (DegenerateGeometryError, DataError) as exc:
            fallback = True
            self.failures.append({"frame": t, "error": str(exc)})
            logger.warning("pose failure at frame %d, using constant velocity: %s", t, exc)
            T_lt = kf.pose_world.inverse() @ self._last_world @ self._velocity

        kf = fuse(kf, pred.X_cross, pred.C_cross, T_lt)
        self.buffer.replace_latest(kf)
        ratio = match_ratio(pred, kf, T_lt, self.config.c_min, self.config.r_match)
        if not 0.0 < self.config.tau_kf < 1.0:
            raise DataError(f"tau_kf must be in (0, 1), got {self.config.tau_kf}")
        new_kf = ratio < self.config.tau_kf
        T_wt = kf.pose_world @ T_lt

        self._velocity = self._last_world.inverse() @ T_wt
        self._last_world = T_wt
        self._n += 1
        res = TrackResult(t, T_wt, new_kf, ratio, fallback)
        self.results.append(res)
        if new_kf:
            new = Keyframe(kf.id + 1, image, pred.X_self.copy(), pred.C_self.copy(), T_wt, t)
            self.buffer.append(new)
            if self.on_keyframe is not None:
                self.on_keyframe(new, kf, self.buffer)
        return res

    def trajectory(self) -> list[Sim3]:
        return [r.T_world for r in self.results]

    def keyframe_cloud(self) -> np.ndarray:
        return np.concatenate([kf.world_points() for kf in self.buffer], axis=0)
