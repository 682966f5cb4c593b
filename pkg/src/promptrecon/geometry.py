"""Similarity transforms and closed-form weighted point-set alignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DataError, DegenerateGeometryError

DEGENERATE_RATIO = 1e-12


@dataclass(frozen=True)
class Sim3:
    """x -> s * R @ x + t."""

    s: float
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "s", float(self.s))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))
        if not self.s > 0:
            raise DataError(f"Sim3 scale must be positive, got {self.s}")

    @classmethod
    def identity(cls) -> "Sim3":
        return cls(1.0, np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> "Sim3":
        A = np.asarray(M, dtype=np.float64)[:3, :3]
        s = np.cbrt(np.linalg.det(A))
        return cls(s, A / s, np.asarray(M)[:3, 3])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.s * self.R
        M[:3, 3] = self.t
        return M

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Transform points stored along the last axis."""
        X = np.asarray(X, dtype=np.float64)
        return self.s * (X @ self.R.T) + self.t

    def __matmul__(self, other: "Sim3") -> "Sim3":
        return Sim3(self.s * other.s, self.R @ other.R, self.s * (self.R @ other.t) + self.t)

    def inverse(self) -> "Sim3":
        Rt = self.R.T
        return Sim3(1.0 / self.s, Rt, -(Rt @ self.t) / self.s)

    @property
    def translation(self) -> np.ndarray:
        return self.t

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.s) and np.all(np.isfinite(self.R)) and np.all(np.isfinite(self.t)))

    def quaternion_xyzw(self) -> np.ndarray:
        return Rotation.from_matrix(self.R).as_quat()

    @classmethod
    def from_tum(cls, t: np.ndarray, q_xyzw: np.ndarray) -> "Sim3":
        return cls(1.0, Rotation.from_quat(q_xyzw).as_matrix(), t)


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, stable near zero."""
    return float(np.linalg.norm(Rotation.from_matrix(R).as_rotvec()))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    return Rotation.from_quat(q / np.linalg.norm(q)).as_matrix()


def umeyama(
    source: np.ndarray,
    target: np.ndarray,
    weights: np.ndarray | None = None,
    with_scale: bool = True,
) -> Sim3:
    """Closed-form T minimising sum_i w_i * ||target_i - T(source_i)||^2.

    Points are ``(N, 3)`` arrays (any leading shape is flattened).  Planar
    configurations are fine; a cross-covariance of rank < 2 (collinear or
    coincident points) raises :class:`DegenerateGeometryError`.
    """
    X = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    Y = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if X.shape != Y.shape:
        raise DataError(f"point sets differ in size: {X.shape} vs {Y.shape}")
    w = np.ones(len(X)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(w) != len(X):
        raise DataError("weights do not match the number of points")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y)) and np.all(np.isfinite(w))):
        raise DataError("non-finite input to alignment")
    if np.any(w < 0):
        raise DataError("negative alignment weight")
    wsum = w.sum()
    if not wsum > 0:
        raise DataError("alignment weights sum to zero")

    mx = w @ X / wsum
    my = w @ Y / wsum
    Xc = X - mx
    Yc = Y - my
    cov = (Yc * w[:, None]).T @ Xc / wsum
    U, D, Vt = np.linalg.svd(cov)
    if not D[0] > 0 or D[1] < DEGENERATE_RATIO * D[0]:
        raise DegenerateGeometryError(f"degenerate point spread, singular values {D}")
    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2] = -1.0
    R = (U * S) @ Vt
    if with_scale:
        var_x = w @ (Xc**2).sum(axis=1) / wsum
        s = float((D * S).sum() / var_x)
    else:
        s = 1.0
    t = my - s * R @ mx
    return Sim3(s, R, t)
