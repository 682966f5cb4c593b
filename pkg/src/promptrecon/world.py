"""Deterministic synthetic scenes, camera paths and a ray-casting renderer.

Scenes are a textured ground plane (z = 0, z up) carrying axis-aligned boxes
and spheres.  Cameras use x right, y down, z forward and a shared pinhole with
focal length W and a centred principal point.  Frames are three-channel feature
grids: shaded albedo, a normal component and an inverse-depth cue.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import RenderError
from .geometry import Sim3

FAMILIES = ("base", "shifted")
LIGHT = np.array([0.3, -0.4, 0.866])
LIGHT = LIGHT / np.linalg.norm(LIGHT)
FRAME_RATE = 30.0
MIN_HIT_FRACTION = 0.5
FAR = 50.0


@dataclass(frozen=True)
class Intrinsics:
    H: int
    W: int

    @property
    def focal(self) -> float:
        return float(self.W)

    @property
    def center(self) -> tuple[float, float]:
        return self.W / 2.0, self.H / 2.0

    def rays(self) -> np.ndarray:
        """Per-pixel ray directions in camera coordinates with unit z, shape (H, W, 3)."""
        cx, cy = self.center
        v, u = np.mgrid[0 : self.H, 0 : self.W].astype(np.float64)
        d = np.stack([(u + 0.5 - cx) / self.focal, (v + 0.5 - cy) / self.focal, np.ones_like(u)], axis=-1)
        return d

    def project(self, P: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Pixel coordinates (u, v) and depth of camera-frame points."""
        cx, cy = self.center
        z = P[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.focal * P[..., 0] / z + cx
            v = self.focal * P[..., 1] / z + cy
        return u, v, z


BOX_COUNT = (12, 20)
SPHERE_COUNT = (5, 9)
N_WAVES = 4
WAVE_FREQ = (2.0, 5.0)
PRETRAIN_SWEEP = (0.3, 0.6)


@dataclass
class ShiftParams:
    """Systematic deviations of the shifted family from the base family."""

    extent_scale: float = 1.0
    texture_freq_scale: float = 1.0
    texture_contrast: float = 1.0
    cue_gain: float = 1.0
    cue_bias: float = 0.0
    cue_power: float = 1.0


BASE_SHIFT = ShiftParams()
DEFAULT_SHIFT = ShiftParams(
    extent_scale=1.6,
    texture_freq_scale=1.8,
    texture_contrast=1.5,
    cue_gain=1.0,
    cue_bias=0.0,
    cue_power=1.35,
)


@dataclass
class Scene:
    seed: int
    family: str
    boxes: np.ndarray  # (Nb, 2, 3) min/max corners
    box_albedo: np.ndarray  # (Nb,)
    spheres: np.ndarray  # (Ns, 4) centre xyz, radius
    sphere_albedo: np.ndarray  # (Ns,)
    wave_vectors: np.ndarray  # (K, 3)
    wave_phases: np.ndarray  # (K,)
    shift: ShiftParams = field(default_factory=ShiftParams)
    extent: float = 3.5

    def texture(self, P: np.ndarray) -> np.ndarray:
        k = self.wave_vectors * self.shift.texture_freq_scale
        waves = np.sin(P @ k.T + self.wave_phases)
        return 0.25 * self.shift.texture_contrast * waves.mean(axis=-1)

    def fingerprint(self) -> dict:
        return {"seed": self.seed, "family": self.family, "shift": asdict(self.shift)}


def generate_scene(seed: int, family: str = "base", shift: ShiftParams | None = None) -> Scene:
    """Build the scene for ``seed``; the shifted family shares layout and object count."""
    if family not in FAMILIES:
        raise ValueError(f"unknown scene family {family!r}")
    rng = np.random.default_rng([seed, 1001])
    n_boxes = int(rng.integers(*BOX_COUNT))
    n_spheres = int(rng.integers(*SPHERE_COUNT))
    extent = 3.5

    centers = rng.uniform(-extent, extent, size=(n_boxes, 2))
    half = rng.uniform(0.15, 0.4, size=(n_boxes, 2))
    height = rng.uniform(0.2, 0.6, size=n_boxes)
    box_albedo = rng.uniform(0.3, 0.9, size=n_boxes)

    s_centers = rng.uniform(-extent, extent, size=(n_spheres, 2))
    radius = rng.uniform(0.2, 0.4, size=n_spheres)
    sphere_albedo = rng.uniform(0.3, 0.9, size=n_spheres)

    k = N_WAVES
    directions = rng.normal(size=(k, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    wave_vectors = directions * rng.uniform(*WAVE_FREQ, size=(k, 1))
    wave_phases = rng.uniform(0, 2 * np.pi, size=k)

    params = BASE_SHIFT if family == "base" else (shift or DEFAULT_SHIFT)
    scale = params.extent_scale
    half = half * scale
    height = np.minimum(height * scale, 0.95)
    radius = np.minimum(radius * scale, 0.5)

    boxes = np.stack(
        [
            np.column_stack([centers - half, np.zeros(n_boxes)]),
            np.column_stack([centers + half, height]),
        ],
        axis=1,
    )
    spheres = np.column_stack([s_centers, radius, radius])
    return Scene(
        seed=seed,
        family=family,
        boxes=boxes,
        box_albedo=box_albedo,
        spheres=spheres,
        sphere_albedo=sphere_albedo,
        wave_vectors=wave_vectors,
        wave_phases=wave_phases,
        shift=params,
        extent=extent,
    )


@dataclass
class RenderedFrame:
    image: np.ndarray  # (H, W, 3)
    gt_pointmap: np.ndarray  # (H, W, 3) camera frame
    gt_pose: Sim3  # camera to world
    index: int = 0
    timestamp: float = 0.0
    hit: np.ndarray | None = None  # (H, W) bool

    @property
    def world_points(self) -> np.ndarray:
        return self.gt_pose.apply(self.gt_pointmap)


def look_pose(position, yaw: float, pitch: float, roll: float = 0.0) -> Sim3:
    """Camera-to-world pose from a position and yaw/pitch(down)/roll angles in radians."""
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    z = np.array([cy * cp, sy * cp, -sp])
    x = np.array([sy, -cy, 0.0])
    y = np.cross(z, x)
    if roll:
        cr, sr = np.cos(roll), np.sin(roll)
        x, y = cr * x + sr * y, -sr * x + cr * y
    return Sim3(1.0, np.column_stack([x, y, z]), np.asarray(position, dtype=np.float64))


def _cast(scene: Scene, origin: np.ndarray, dirs: np.ndarray):
    """Nearest hit depth, world normal and albedo per ray (dirs have unit camera-z)."""
    n = len(dirs)
    depth = np.full(n, np.inf)
    normal = np.zeros((n, 3))
    albedo = np.zeros(n)

    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.where(dz < 0, -origin[2] / dz, np.inf)
    take = lam < depth
    depth[take] = lam[take]
    normal[take] = (0.0, 0.0, 1.0)
    albedo[take] = 0.6

    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    for b, (lo, hi) in enumerate(scene.boxes):
        t0 = (lo - origin) * inv
        t1 = (hi - origin) * inv
        tmin = np.minimum(t0, t1)
        tmax = np.maximum(t0, t1)
        tmin = np.where(np.isnan(tmin), -np.inf, tmin)
        tmax = np.where(np.isnan(tmax), np.inf, tmax)
        enter = tmin.max(axis=1)
        leave = tmax.min(axis=1)
        hit = (enter <= leave) & (enter > 1e-9)
        take = hit & (enter < depth)
        if np.any(take):
            axis = tmin[take].argmax(axis=1)
            nrm = np.zeros((take.sum(), 3))
            nrm[np.arange(len(axis)), axis] = -np.sign(dirs[take][np.arange(len(axis)), axis])
            depth[take] = enter[take]
            normal[take] = nrm
            albedo[take] = scene.box_albedo[b]

    for k, (cx, cy, cz, r) in enumerate(scene.spheres):
        oc = origin - np.array([cx, cy, cz])
        a = (dirs**2).sum(axis=1)
        bq = 2.0 * dirs @ oc
        c = oc @ oc - r * r
        disc = bq * bq - 4 * a * c
        with np.errstate(invalid="ignore"):
            lam = (-bq - np.sqrt(disc)) / (2 * a)
        take = (disc > 0) & (lam > 1e-9) & (lam < depth)
        if np.any(take):
            depth[take] = lam[take]
            hitp = origin + lam[take, None] * dirs[take]
            normal[take] = (hitp - np.array([cx, cy, cz])) / r
            albedo[take] = scene.sphere_albedo[k]
    return depth, normal, albedo


def render(scene: Scene, pose: Sim3, intr: Intrinsics, index: int = 0, timestamp: float = 0.0) -> RenderedFrame:
    """Ray-cast one frame.  Raises :class:`RenderError` if under half the pixels hit geometry."""
    rays_c = intr.rays().reshape(-1, 3)
    dirs_w = rays_c @ pose.R.T
    depth, normal_w, albedo = _cast(scene, pose.t, dirs_w)
    hit = np.isfinite(depth)
    if hit.mean() < MIN_HIT_FRACTION:
        raise RenderError(f"only {hit.mean():.0%} of pixels hit geometry")
    depth = np.where(hit, depth, FAR)

    pts_c = rays_c * depth[:, None]
    world = pose.t + depth[:, None] * dirs_w
    tex = albedo + scene.texture(world)
    shade = 0.35 + 0.65 * np.clip(normal_w @ LIGHT, 0.0, None)
    normal_c = normal_w @ pose.R
    sh = scene.shift
    cue = sh.cue_gain * depth ** (-sh.cue_power) + sh.cue_bias
    image = np.stack([tex * shade, -normal_c[:, 1], cue], axis=-1)
    image[~hit] = 0.0
    return RenderedFrame(
        image=image.reshape(intr.H, intr.W, 3),
        gt_pointmap=pts_c.reshape(intr.H, intr.W, 3),
        gt_pose=pose,
        index=index,
        timestamp=timestamp,
        hit=hit.reshape(intr.H, intr.W),
    )


@dataclass
class Trajectory:
    poses: list[Sim3]
    timestamps: np.ndarray

    def __len__(self) -> int:
        return len(self.poses)

    def reversed(self) -> "Trajectory":
        return Trajectory(self.poses[::-1], self.timestamps.copy())

    def positions(self) -> np.ndarray:
        return np.array([p.t for p in self.poses])


def loop_trajectory(seed: int, n_frames: int = 200, revolutions: float = 1.0) -> Trajectory:
    """Elliptic loop around the scene centre; the last frame re-views the first frame's surface."""
    rng = np.random.default_rng([seed, 2002])
    a = rng.uniform(1.8, 2.4)
    b = rng.uniform(1.4, 2.0)
    phase = rng.uniform(0, 2 * np.pi)
    direction = 1.0 if rng.random() < 0.5 else -1.0
    height = rng.uniform(1.1, 1.3)
    inward = rng.uniform(0.2, 0.5)
    poses = []
    for i in range(n_frames):
        th = phase + direction * 2 * np.pi * revolutions * i / n_frames
        pos = np.array([a * np.cos(th), b * np.sin(th), height + 0.05 * np.sin(3 * th)])
        tangent = direction * np.array([-a * np.sin(th), b * np.cos(th)])
        yaw = np.arctan2(tangent[1], tangent[0]) + direction * inward
        pitch = np.deg2rad(45.0 + 3.0 * np.sin(2 * th))
        roll = np.deg2rad(2.0 * np.sin(5 * th))
        poses.append(look_pose(pos, yaw, pitch, roll))
    return Trajectory(poses, np.arange(n_frames) / FRAME_RATE)


def pretrain_trajectory(seed: int, n_frames: int) -> Trajectory:
    """Loop arc with a seed-dependent sweep, used to draw pretraining pairs."""
    sweep = np.random.default_rng([seed, 2003]).uniform(*PRETRAIN_SWEEP)
    return loop_trajectory(seed, n_frames, revolutions=sweep * n_frames / 200)


def random_pose(rng: np.random.Generator, extent: float = 2.5) -> Sim3:
    pos = np.array([*rng.uniform(-extent, extent, size=2), rng.uniform(1.0, 1.4)])
    return look_pose(pos, rng.uniform(-np.pi, np.pi), np.deg2rad(rng.uniform(40, 50)), np.deg2rad(rng.uniform(-3, 3)))


def perturb_pose(pose: Sim3, rng: np.random.Generator, max_shift: float = 0.5, max_yaw_deg: float = 15.0) -> Sim3:
    """A nearby camera with similar height and pitch."""
    shift = np.append(rng.uniform(-max_shift, max_shift, size=2), rng.uniform(-0.05, 0.05))
    z = pose.R[:, 2]
    yaw = np.arctan2(z[1], z[0]) + np.deg2rad(rng.uniform(-max_yaw_deg, max_yaw_deg))
    pitch = -np.arcsin(np.clip(z[2], -1, 1)) + np.deg2rad(rng.uniform(-3, 3))
    return look_pose(pose.t + shift, yaw, pitch, np.deg2rad(rng.uniform(-3, 3)))


def make_stream(scene: Scene, trajectory: Trajectory, intr: Intrinsics) -> list[RenderedFrame]:
    return [
        render(scene, pose, intr, index=i, timestamp=float(ts))
        for i, (pose, ts) in enumerate(zip(trajectory.poses, trajectory.timestamps))
    ]


def cross_pointmap(ref: RenderedFrame, frame: RenderedFrame) -> np.ndarray:
    """Ground-truth pointmap of ``ref``'s pixels expressed in ``frame``'s camera coordinates."""
    return (frame.gt_pose.inverse() @ ref.gt_pose).apply(ref.gt_pointmap)


def visibility(ref: RenderedFrame, frame: RenderedFrame, intr: Intrinsics, rel_tol: float = 0.03) -> np.ndarray:
    """Which of ``ref``'s pixels are seen, unoccluded, by ``frame``."""
    P = cross_pointmap(ref, frame)
    u, v, z = intr.project(P)
    inside = (z > 1e-6) & (u >= 0) & (u < intr.W) & (v >= 0) & (v < intr.H)
    ui = np.clip(np.floor(np.nan_to_num(u)).astype(int), 0, intr.W - 1)
    vi = np.clip(np.floor(np.nan_to_num(v)).astype(int), 0, intr.H - 1)
    seen_depth = frame.gt_pointmap[vi, ui, 2]
    unoccluded = z <= seen_depth * (1.0 + rel_tol)
    hit = ref.hit if ref.hit is not None else np.ones(inside.shape, dtype=bool)
    return inside & unoccluded & hit


def overlap(ref: RenderedFrame, frame: RenderedFrame, intr: Intrinsics) -> float:
    return float(visibility(ref, frame, intr).mean())


def save_stream(frames: list[RenderedFrame], scene: Scene, trajectory_kind: str, intr: Intrinsics, out_dir) -> Path:
    """Write per-frame ``.npy`` blobs plus ``manifest.json``."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    entries = []
    for f in frames:
        name = f"frames/{f.index:05d}"
        np.save(out / f"{name}_image.npy", f.image)
        np.save(out / f"{name}_gt.npy", f.gt_pointmap)
        entries.append(
            {
                "index": f.index,
                "timestamp": f.timestamp,
                "image": f"{name}_image.npy",
                "gt_pointmap": f"{name}_gt.npy",
                "pose": f.gt_pose.matrix().tolist(),
            }
        )
    manifest = {
        "scene": scene.fingerprint(),
        "trajectory": trajectory_kind,
        "intrinsics": {"H": intr.H, "W": intr.W, "focal": intr.focal, "center": list(intr.center)},
        "frames": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out / "manifest.json"


def load_stream(manifest_path) -> tuple[list[RenderedFrame], dict]:
    path = Path(manifest_path)
    manifest = json.loads(path.read_text())
    frames = []
    for e in manifest["frames"]:
        frames.append(
            RenderedFrame(
                image=np.load(path.parent / e["image"]),
                gt_pointmap=np.load(path.parent / e["gt_pointmap"]),
                gt_pose=Sim3.from_matrix(np.array(e["pose"])),
                index=e["index"],
                timestamp=e["timestamp"],
            )
        )
    return frames, manifest


class OraclePredictor:
    """Stands in for the network with exact ray-cast pointmaps.

    Cross confidences are high where the reference pixel is visible from the
    query camera and just above 1 elsewhere, so the match-ratio keyframe rule
    reduces to geometric overlap.
    """

    def __init__(self, frames: list[RenderedFrame], intr: Intrinsics, conf: float = 10.0, low: float = 1.0 + 1e-3):
        self.intr = intr
        self.conf = conf
        self.low = low
        self._by_image = {f.image.tobytes(): f for f in frames}
        self.forward_count = 0

    def _frame(self, image: np.ndarray) -> RenderedFrame:
        try:
            return self._by_image[np.asarray(image, dtype=np.float64).tobytes()]
        except KeyError:
            raise KeyError("image not part of the oracle's stream") from None

    def __call__(self, I: np.ndarray, K: np.ndarray):
        from .predictor import PredictionPair

        self.forward_count += 1
        fi, fk = self._frame(I), self._frame(K)
        vis = visibility(fk, fi, self.intr)
        return PredictionPair(
            X_self=fi.gt_pointmap.copy(),
            X_cross=cross_pointmap(fk, fi),
            C_self=np.full(fi.gt_pointmap.shape[:2], self.conf),
            C_cross=np.where(vis, self.conf, self.low),
        )
