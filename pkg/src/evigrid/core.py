"""Geometric value types shared across the pipeline.

Frames are right-handed with z pointing up. Points are carried as ``(N, 3)``
float64 arrays with a parallel ``(N,)`` intensity array rather than as lists of
point objects.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """Rigid transform stored as unit quaternion ``(qx, qy, qz, qw)`` and translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4).copy()
        t = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        norm = np.linalg.norm(q)
        if not np.isfinite(norm) or norm == 0.0:
            raise ValueError("quaternion must be finite and non-zero")
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        q /= norm
        # canonical sign keeps serialization stable
        if q[3] < 0.0:
            q = -q
        object.__setattr__(self, "rotation", _readonly(q))
        object.__setattr__(self, "translation", _readonly(t))

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls()

    @classmethod
    def from_translation(cls, x: float, y: float, z: float) -> "PoseSE3":
        return cls(translation=np.array([x, y, z], dtype=np.float64))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "PoseSE3":
        T = np.asarray(T, dtype=np.float64)
        return cls(Rotation.from_matrix(T[:3, :3]).as_quat(), T[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "PoseSE3":
        return cls(Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_quat(), translation)

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "PoseSE3":
        return cls.from_rotvec([0.0, 0.0, yaw], translation)

    @property
    def R(self) -> np.ndarray:
        x, y, z, w = self.rotation
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
            ]
        )

    @property
    def t(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def rotvec(self) -> np.ndarray:
        return Rotation.from_quat(self.rotation).as_rotvec()

    def inverse(self) -> "PoseSE3":
        x, y, z, w = self.rotation
        q_inv = np.array([-x, -y, -z, w])
        return PoseSE3(q_inv, -(self.R.T @ self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map ``(N, 3)`` or ``(3,)`` points from the local into the target frame."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.R.T + self.translation

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        return compose(self, other)

    def allclose(self, other: "PoseSE3", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.matrix(), other.matrix(), rtol=0.0, atol=atol)
        )

    def __repr__(self) -> str:
        q = ", ".join(f"{v:.6g}" for v in self.rotation)
        t = ", ".join(f"{v:.6g}" for v in self.translation)
        return f"PoseSE3(q=[{q}], t=[{t}])"


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ]
    )


def compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """Return ``a ∘ b``: applying the result equals applying ``b`` then ``a``."""
    return PoseSE3(_quat_mul(a.rotation, b.rotation), a.R @ b.translation + a.translation)


def inverse(pose: PoseSE3) -> PoseSE3:
    return pose.inverse()


@dataclass(frozen=True, eq=False)
class PointCloud:
    """One range scan: points, intensities in [0, 1], and the sensor origin."""

    points: np.ndarray
    intensity: Optional[np.ndarray] = None
    sensor_origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    timestamp: float = 0.0
    scan_id: str = "0"

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if self.intensity is None:
            inten = np.zeros(len(pts))
        else:
            inten = np.array(self.intensity, dtype=np.float64).reshape(-1)
        if len(inten) != len(pts):
            raise ValueError("intensity length does not match point count")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        if np.any((inten < 0.0) | (inten > 1.0)) or not np.all(np.isfinite(inten)):
            raise ValueError("intensity must lie in [0, 1]")
        origin = np.array(self.sensor_origin, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(origin)):
            raise ValueError("sensor origin must be finite")
        if not np.isfinite(self.timestamp):
            raise ValueError("timestamp must be finite")
        object.__setattr__(self, "points", _readonly(pts))
        object.__setattr__(self, "intensity", _readonly(inten))
        object.__setattr__(self, "sensor_origin", _readonly(origin))
        object.__setattr__(self, "timestamp", float(self.timestamp))
        object.__setattr__(self, "scan_id", str(self.scan_id))

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, mask_or_index) -> "PointCloud":
        return replace(
            self,
            points=self.points[mask_or_index],
            intensity=self.intensity[mask_or_index],
        )


def transform_cloud(cloud: PointCloud, pose: PoseSE3) -> PointCloud:
    """Map points and sensor origin by ``pose``; intensities and metadata are kept."""
    return replace(
        cloud,
        points=pose.apply(cloud.points),
        sensor_origin=pose.apply(cloud.sensor_origin),
    )


@dataclass(frozen=True)
class ScanSequence:
    scans: tuple
    poses: Optional[tuple] = None

    def __post_init__(self):
        scans = tuple(self.scans)
        stamps = np.array([s.timestamp for s in scans])
        if len(scans) > 1 and not np.all(np.diff(stamps) > 0):
            raise ValueError("scan timestamps must be strictly increasing")
        ids = [s.scan_id for s in scans]
        if len(set(ids)) != len(ids):
            raise ValueError("scan ids must be unique within a sequence")
        object.__setattr__(self, "scans", scans)
        if self.poses is not None:
            poses = tuple(self.poses)
            if len(poses) != len(scans):
                raise ValueError("pose count must equal scan count")
            object.__setattr__(self, "poses", poses)

    def __len__(self) -> int:
        return len(self.scans)

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([s.timestamp for s in self.scans])

    def index_of(self, scan_id: str) -> int:
        for i, s in enumerate(self.scans):
            if s.scan_id == str(scan_id):
                return i
        raise KeyError(f"scan {scan_id!r} not in sequence")

    def with_poses(self, poses: Sequence[PoseSE3]) -> "ScanSequence":
        return ScanSequence(self.scans, tuple(poses))
