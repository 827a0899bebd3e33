"""Robust ground plane estimation and ground / non-ground / multipath split."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .core import PointCloud, PoseSE3


class DegenerateInputError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class PlaneParams:
    """Plane ``n . p + d = 0`` with unit normal oriented so that ``n_z > 0``."""

    normal: np.ndarray
    d: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(n)
        if not np.isfinite(norm) or norm == 0.0:
            raise ValueError("plane normal must be non-zero")
        d = float(self.d) / norm
        n = n / norm
        if n[2] < 0.0:
            n, d = -n, -d
        n.setflags(write=False)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "d", d)

    def signed_height(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.normal + self.d

    def transformed(self, pose: PoseSE3) -> "PlaneParams":
        n = pose.R @ self.normal
        return PlaneParams(n, self.d - n @ pose.t)

    def to_dict(self) -> dict:
        nx, ny, nz = (float(v) for v in self.normal)
        return {"nx": nx, "ny": ny, "nz": nz, "d": float(self.d)}

    @classmethod
    def from_dict(cls, data: dict) -> "PlaneParams":
        return cls(np.array([data["nx"], data["ny"], data["nz"]]), data["d"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _weighted_plane(pts: np.ndarray, w: np.ndarray):
    wsum = w.sum()
    centroid = (w[:, None] * pts).sum(axis=0) / wsum
    c = pts - centroid
    cov = (w[:, None] * c).T @ c / wsum
    vals, vecs = np.linalg.eigh(cov)
    n = vecs[:, 0]
    if n[2] < 0:
        n = -n
    return n, -float(n @ centroid), vals


def _check_rank(pts: np.ndarray):
    if len(pts) < 3:
        raise DegenerateInputError("need at least 3 points to fit a plane")
    c = pts - pts.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    scale = max(s[0], 1e-300)
    if s[1] <= 1e-9 * scale:
        raise DegenerateInputError("points are collinear or coincident")


def cauchy_cost(residuals: np.ndarray, scale: float) -> float:
    c2 = scale * scale
    return float(np.sum(c2 * np.log1p(residuals * residuals / c2)))


class PlaneFit(NamedTuple):
    plane: PlaneParams
    iterations: int
    costs: list


def fit_plane_irls(points, scale: float = 0.05, max_iter: int = 2000, tol: float = 1e-10,
                   init_fraction: float = 0.3) -> PlaneFit:
    """Cauchy-robust plane fit by IRLS, with the per-iteration cost history."""
    pts = np.asarray(getattr(points, "points", points), dtype=np.float64)
    _check_rank(pts)
    n_init = max(3, int(math.ceil(init_fraction * len(pts))))
    low = pts[np.argsort(pts[:, 2], kind="stable")[:n_init]]
    try:
        _check_rank(low)
        n, d, _ = _weighted_plane(low, np.ones(len(low)))
    except DegenerateInputError:
        n, d, _ = _weighted_plane(pts, np.ones(len(pts)))

    c2 = scale * scale
    costs = [cauchy_cost(pts @ n + d, scale)]
    for it in range(1, max_iter + 1):
        r = pts @ n + d
        w = 1.0 / (1.0 + r * r / c2)
        n_new, d_new, _ = _weighted_plane(pts, w)
        step = max(np.max(np.abs(n_new - n)), abs(d_new - d))
        n, d = n_new, d_new
        costs.append(cauchy_cost(pts @ n + d, scale))
        if step < tol:
            return PlaneFit(PlaneParams(n, d), it, costs)
    raise ConvergenceError(f"plane fit did not converge in {max_iter} iterations (last step {step:.3g})")


def fit_plane(points, scale: float = 0.05, **kw) -> PlaneParams:
    """Minimize the summed Cauchy loss of point-to-plane distances.

    ``scale`` is the Cauchy scale in meters. The iteration starts from the
    least-squares plane through the lowest 30 % of points by height.
    """
    return fit_plane_irls(points, scale, **kw).plane


@dataclass(frozen=True)
class GroundSegmentation:
    ground: PointCloud
    non_ground: PointCloud
    discarded: PointCloud
    labels: np.ndarray  # 0 ground, 1 non-ground, -1 discarded

    def counts(self) -> dict:
        return {"ground": len(self.ground), "non_ground": len(self.non_ground), "discarded": len(self.discarded)}


GROUND, NON_GROUND, DISCARDED = 0, 1, -1


def classify_points(points, plane: PlaneParams, ground_band: float = 0.2,
                    multipath_cutoff: float = -0.2) -> np.ndarray:
    h = plane.signed_height(points)
    labels = np.full(len(h), GROUND, dtype=np.int8)
    labels[h > ground_band] = NON_GROUND
    labels[h < multipath_cutoff] = DISCARDED
    return labels


def segment_points(cloud: PointCloud, plane: PlaneParams, ground_band: float = 0.2,
                   multipath_cutoff: float = -0.2) -> GroundSegmentation:
    labels = classify_points(cloud.points, plane, ground_band, multipath_cutoff)
    return GroundSegmentation(
        ground=cloud.subset(labels == GROUND),
        non_ground=cloud.subset(labels == NON_GROUND),
        discarded=cloud.subset(labels == DISCARDED),
        labels=labels,
    )
