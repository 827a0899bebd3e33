"""Synthetic scenes and a simple spinning range sensor.

Scenes are built from a ground plane, axis-aligned boxes and vertical
cylinders; boxes and cylinders may move with constant velocity. Each simulated
point carries the id of the primitive it hit (0 = ground) so tests can check
algorithms against labels known by construction.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .core import PointCloud, PoseSE3, ScanSequence
from .ground import PlaneParams

GROUND_LABEL = 0
NO_HIT = -1


@dataclass
class Box:
    center: tuple
    size: tuple
    reflectivity: float = 0.5
    velocity: tuple = (0.0, 0.0, 0.0)

    def center_at(self, t: float) -> np.ndarray:
        return np.asarray(self.center, float) + t * np.asarray(self.velocity, float)

    @property
    def moving(self) -> bool:
        return any(v != 0.0 for v in self.velocity)


@dataclass
class Cylinder:
    """Vertical cylinder standing on ``base`` = (x, y, z_bottom)."""

    base: tuple
    radius: float
    height: float
    reflectivity: float = 0.5
    velocity: tuple = (0.0, 0.0, 0.0)

    def base_at(self, t: float) -> np.ndarray:
        return np.asarray(self.base, float) + t * np.asarray(self.velocity, float)

    @property
    def moving(self) -> bool:
        return any(v != 0.0 for v in self.velocity)


@dataclass
class SensorModel:
    beams: int = 32
    azimuth_steps: int = 720
    vfov: tuple = (-25.0, 3.0)  # degrees, lowest and highest beam
    hfov: float = 360.0
    max_range: float = 60.0
    min_range: float = 0.5
    range_noise: float = 0.0
    seed: int = 0

    def directions(self) -> np.ndarray:
        elev = np.deg2rad(np.linspace(self.vfov[0], self.vfov[1], self.beams))
        if self.hfov >= 360.0:
            az = np.arange(self.azimuth_steps) * (2 * np.pi / self.azimuth_steps)
        else:
            half = np.deg2rad(self.hfov) / 2
            az = np.linspace(-half, half, self.azimuth_steps)
        el, a = np.meshgrid(elev, az, indexing="ij")
        d = np.stack([np.cos(el) * np.cos(a), np.cos(el) * np.sin(a), np.sin(el)], axis=-1)
        return d.reshape(-1, 3)


@dataclass
class SceneSpec:
    ground: dict = field(default_factory=lambda: {"nx": 0.0, "ny": 0.0, "nz": 1.0, "d": 0.0})
    ground_reflectivity: float = 0.3
    boxes: list = field(default_factory=list)
    cylinders: list = field(default_factory=list)
    trajectory: list = field(default_factory=lambda: [(0.0, PoseSE3.from_translation(0, 0, 1.8))])
    sensor: SensorModel = field(default_factory=SensorModel)

    @property
    def plane(self) -> PlaneParams:
        return PlaneParams.from_dict(self.ground)

    @property
    def primitives(self) -> list:
        return list(self.boxes) + list(self.cylinders)

    def pose_at(self, t: float) -> PoseSE3:
        traj = sorted(self.trajectory, key=lambda e: e[0])
        times = np.array([e[0] for e in traj])
        if len(traj) == 1:
            return traj[0][1]
        if t < times[0] - 1e-9 or t > times[-1] + 1e-9:
            raise ValueError(f"time {t} outside trajectory span [{times[0]}, {times[-1]}]")
        t = float(np.clip(t, times[0], times[-1]))
        k = int(np.searchsorted(times, t, side="right") - 1)
        k = min(k, len(traj) - 2)
        t0, p0 = traj[k]
        t1, p1 = traj[k + 1]
        a = (t - t0) / (t1 - t0)
        if a == 0.0:
            return p0
        if a == 1.0:
            return p1
        rots = Rotation.from_quat(np.stack([p0.rotation, p1.rotation]))
        q = Slerp([0.0, 1.0], rots)([a]).as_quat()[0]
        return PoseSE3(q, (1 - a) * p0.t + a * p1.t)

    def to_dict(self) -> dict:
        return {
            "ground": dict(self.ground),
            "ground_reflectivity": self.ground_reflectivity,
            "boxes": [asdict(b) for b in self.boxes],
            "cylinders": [asdict(c) for c in self.cylinders],
            "trajectory": [
                {"t": t, "translation": p.t.tolist(), "rotation": p.rotation.tolist()} for t, p in self.trajectory
            ],
            "sensor": asdict(self.sensor),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        traj = [(float(e["t"]), PoseSE3(e.get("rotation", [0, 0, 0, 1]), e["translation"])) for e in data["trajectory"]]
        sensor = data.get("sensor", {})
        sensor = SensorModel(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in sensor.items()})
        return cls(
            ground=dict(data.get("ground", {"nx": 0.0, "ny": 0.0, "nz": 1.0, "d": 0.0})),
            ground_reflectivity=float(data.get("ground_reflectivity", 0.3)),
            boxes=[Box(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in b.items()}) for b in data.get("boxes", [])],
            cylinders=[Cylinder(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in c.items()})
                       for c in data.get("cylinders", [])],
            trajectory=traj,
            sensor=sensor,
        )


# -- intersection kernels (world frame, vectorized over rays) --------------

def _hit_plane(o, d, plane: PlaneParams):
    denom = d @ plane.normal
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -(o @ plane.normal + plane.d) / denom
    t[~np.isfinite(t) | (t <= 0)] = np.inf
    return t


def _hit_box(o, d, center, size):
    lo = center - 0.5 * np.asarray(size)
    hi = center + 0.5 * np.asarray(size)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    tlo = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    thi = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
    # rays parallel to a slab: inside -> unconstrained, outside -> miss
    par = d == 0
    inside = (o >= lo) & (o <= hi)
    tlo = np.where(par, np.where(inside, -np.inf, np.inf), tlo)
    thi = np.where(par, np.where(inside, np.inf, -np.inf), thi)
    tn = tlo.max(axis=1)
    tf = thi.min(axis=1)
    t = np.where((tn <= tf) & (tn > 0), tn, np.inf)
    return t


def _hit_cylinder(o, d, base, radius, height):
    ox = o[:, 0] - base[0]
    oy = o[:, 1] - base[1]
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2 * (ox * d[:, 0] + oy * d[:, 1])
    c = ox * ox + oy * oy - radius * radius
    disc = b * b - 4 * a * c
    with np.errstate(divide="ignore", invalid="ignore"):
        t_side = (-b - np.sqrt(disc)) / (2 * a)
    z = o[:, 2] + t_side * d[:, 2]
    ok = (disc >= 0) & (a > 0) & (t_side > 0) & (z >= base[2]) & (z <= base[2] + height)
    t_side = np.where(ok, t_side, np.inf)
    # top cap
    with np.errstate(divide="ignore", invalid="ignore"):
        t_top = (base[2] + height - o[:, 2]) / d[:, 2]
    px = ox + t_top * d[:, 0]
    py = oy + t_top * d[:, 1]
    ok = np.isfinite(t_top) & (t_top > 0) & (px * px + py * py <= radius * radius)
    t_top = np.where(ok, t_top, np.inf)
    return np.minimum(t_side, t_top)


class SimulatedScan(NamedTuple):
    cloud: PointCloud
    labels: np.ndarray
    pose: PoseSE3


def cast_rays(scene: SceneSpec, origins: np.ndarray, dirs: np.ndarray, t: float):
    """Nearest hit distance and label per ray (``inf`` / ``NO_HIT`` for misses)."""
    best = _hit_plane(origins, dirs, scene.plane)
    labels = np.where(np.isfinite(best), GROUND_LABEL, NO_HIT)
    for k, prim in enumerate(scene.primitives, start=1):
        if isinstance(prim, Box):
            tk = _hit_box(origins, dirs, prim.center_at(t), prim.size)
        else:
            tk = _hit_cylinder(origins, dirs, prim.base_at(t), prim.radius, prim.height)
        closer = tk < best
        best = np.where(closer, tk, best)
        labels = np.where(closer, k, labels)
    return best, labels


def _reflectivity(scene: SceneSpec, labels: np.ndarray) -> np.ndarray:
    table = np.array([scene.ground_reflectivity] + [p.reflectivity for p in scene.primitives], dtype=np.float64)
    return np.clip(table[labels], 0.0, 1.0)


def simulate_scan(scene: SceneSpec, t: float, scan_id: Optional[str] = None) -> SimulatedScan:
    """Simulate one scan at time ``t``; points are expressed in the sensor frame."""
    pose = scene.pose_at(t)
    s = scene.sensor
    dirs_local = s.directions()
    dirs = dirs_local @ pose.R.T
    origins = np.broadcast_to(pose.t, dirs.shape)
    rng_t, labels = cast_rays(scene, origins, dirs, t)
    hit = (rng_t <= s.max_range) & (rng_t >= s.min_range)
    r = rng_t.copy()
    if s.range_noise > 0:
        key = int(round(t * 1e6)) & 0xFFFFFFFFFFFF
        gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(s.seed), key])))
        r = r + s.range_noise * gen.standard_normal(len(r))
    hit &= r > 0
    pts = dirs_local[hit] * r[hit, None]
    labels = labels[hit]
    cloud = PointCloud(
        pts,
        intensity=_reflectivity(scene, labels),
        timestamp=t,
        scan_id=scan_id if scan_id is not None else f"{int(round(t * 1e6)):012d}",
    )
    return SimulatedScan(cloud, labels.astype(np.int32), pose)


class SimulatedSequence(NamedTuple):
    sequence: ScanSequence
    gt_poses: list
    labels: list

    def relative_gt(self) -> list:
        """Ground-truth poses expressed relative to the first scan."""
        ref_inv = self.gt_poses[0].inverse()
        return [ref_inv @ p for p in self.gt_poses]


def simulate_sequence(scene: SceneSpec, rate: float, duration: float, t0: Optional[float] = None) -> SimulatedSequence:
    if t0 is None:
        t0 = min(e[0] for e in scene.trajectory)
    count = int(np.floor(duration * rate + 1e-9)) + 1
    scans, poses, labels = [], [], []
    for k in range(count):
        t = t0 + k / rate
        sim = simulate_scan(scene, t, scan_id=f"{k:06d}")
        scans.append(sim.cloud)
        poses.append(sim.pose)
        labels.append(sim.labels)
    return SimulatedSequence(ScanSequence(tuple(scans)), poses, labels)


# -- footprints for test oracles ---------------------------------------------

def swept_box_mask(box: Box, t0: float, t1: float, xy: np.ndarray) -> np.ndarray:
    """True where the box footprint covers ``xy`` at some time in ``[t0, t1]``."""
    c0 = np.asarray(box.center, float)[:2]
    v = np.asarray(box.velocity, float)[:2]
    h = 0.5 * np.asarray(box.size, float)[:2]
    lo = np.full(len(xy), t0)
    hi = np.full(len(xy), t1)
    for a in range(2):
        rel = xy[:, a] - c0[a]
        if v[a] == 0.0:
            inside = np.abs(rel) <= h[a]
            hi = np.where(inside, hi, -np.inf)
            continue
        ta = (rel - h[a]) / v[a]
        tb = (rel + h[a]) / v[a]
        lo = np.maximum(lo, np.minimum(ta, tb))
        hi = np.minimum(hi, np.maximum(ta, tb))
    return lo <= hi


def footprint_mask(prim, t: float, xy: np.ndarray) -> np.ndarray:
    if isinstance(prim, Box):
        c = prim.center_at(t)
        h = 0.5 * np.asarray(prim.size)
        return (np.abs(xy[:, 0] - c[0]) <= h[0]) & (np.abs(xy[:, 1] - c[1]) <= h[1])
    b = prim.base_at(t)
    return (xy[:, 0] - b[0]) ** 2 + (xy[:, 1] - b[1]) ** 2 <= prim.radius ** 2


# -- demo scenes -------------------------------------------------------------

def _walls(extent: float, height: float = 3.0, thickness: float = 0.5) -> list:
    e = extent
    return [
        Box((0.0, e, height / 2), (2 * e, thickness, height), 0.6),
        Box((0.0, -e, height / 2), (2 * e, thickness, height), 0.6),
        Box((e, 0.0, height / 2), (thickness, 2 * e, height), 0.6),
        Box((-e, 0.0, height / 2), (thickness, 2 * e, height), 0.6),
    ]


def box_scene(sensor: Optional[SensorModel] = None, pose: Optional[PoseSE3] = None) -> SceneSpec:
    """Static courtyard: walls, a few boxes and poles. Rich enough to register against."""
    boxes = _walls(20.0) + [
        Box((6.0, 2.0, 0.75), (2.0, 1.5, 1.5), 0.8),
        Box((-4.0, -6.0, 1.0), (1.5, 3.0, 2.0), 0.7),
        Box((3.0, -8.0, 0.6), (4.0, 1.8, 1.2), 0.9),
        Box((-9.0, 5.0, 1.5), (2.5, 2.5, 3.0), 0.4),
        Box((12.0, -3.0, 0.9), (1.0, 4.0, 1.8), 0.5),
    ]
    cylinders = [
        Cylinder((-3.0, 7.0, 0.0), 0.3, 4.0, 0.6),
        Cylinder((9.0, 9.0, 0.0), 0.4, 5.0, 0.5),
        Cylinder((-12.0, -10.0, 0.0), 0.5, 3.5, 0.7),
        Cylinder((14.0, 12.0, 0.0), 0.35, 4.5, 0.6),
    ]
    return SceneSpec(
        boxes=boxes,
        cylinders=cylinders,
        trajectory=[(0.0, pose or PoseSE3.from_translation(0.0, 0.0, 1.8))],
        sensor=sensor or SensorModel(beams=32, azimuth_steps=360, vfov=(-25.0, 5.0), max_range=40.0),
    )


def drive_scene(speed: float = 1.0, duration: float = 12.0, sensor: Optional[SensorModel] = None,
                start=(-5.0, 0.0)) -> SceneSpec:
    """The courtyard driven through along +x at constant ``speed``."""
    scene = box_scene(sensor)
    x0, y0 = start
    scene.trajectory = [
        (0.0, PoseSE3.from_translation(x0, y0, 1.8)),
        (duration, PoseSE3.from_translation(x0 + speed * duration, y0, 1.8)),
    ]
    return scene


def moving_box_scene(sensor: Optional[SensorModel] = None) -> SceneSpec:
    """Static sensor in a walled yard; one static box and one box crossing in front.

    The moving box is the second primitive and crosses x = 8 m from y = -4 m
    at t = -2 s to y = +4 m at t = +2 s. The walls give near-horizontal beams
    a return so the space the box vacates collects transmissions.
    """
    boxes = [
        Box((-10.0, 0.0, 0.9), (1.6, 1.6, 1.8), 0.7),  # static reference box
        Box((8.0, 0.0, 0.9), (0.8, 0.8, 1.8), 0.7, velocity=(0.0, 2.0, 0.0)),
    ] + _walls(17.0, height=4.0)
    return SceneSpec(
        boxes=boxes,
        trajectory=[(-2.0, PoseSE3.from_translation(0.0, 0.0, 1.8)), (2.0, PoseSE3.from_translation(0.0, 0.0, 1.8))],
        sensor=sensor or SensorModel(beams=48, azimuth_steps=720, vfov=(-30.0, 5.0), max_range=30.0,
                                     range_noise=0.01, seed=3),
    )


def occlusion_scene(sensor: Optional[SensorModel] = None) -> SceneSpec:
    """Sensor drives past a row of parked boxes that shadow the area behind them."""
    boxes = [
        Box((4.0, 4.0, 0.8), (3.0, 1.6, 1.6), 0.8),
        Box((-2.0, 4.0, 0.8), (3.0, 1.6, 1.6), 0.8),
        Box((10.0, 4.5, 1.0), (3.0, 1.8, 2.0), 0.8),
        Box((-8.0, 4.5, 1.0), (3.0, 1.8, 2.0), 0.8),
        Box((1.0, 9.0, 1.0), (6.0, 1.0, 2.0), 0.6),
        Box((2.0, -5.0, 0.9), (4.0, 1.8, 1.8), 0.7),
    ] + _walls(18.0, height=4.0)
    cylinders = [Cylinder((6.0, -9.0, 0.0), 0.4, 4.0, 0.5), Cylinder((-5.0, -8.0, 0.0), 0.4, 4.0, 0.5)]
    return SceneSpec(
        boxes=boxes,
        cylinders=cylinders,
        trajectory=[(-2.0, PoseSE3.from_translation(-6.0, 0.0, 1.8)), (2.0, PoseSE3.from_translation(6.0, 0.0, 1.8))],
        sensor=sensor or SensorModel(beams=32, azimuth_steps=720, vfov=(-30.0, 5.0), max_range=30.0,
                                     range_noise=0.01, seed=5),
    )
