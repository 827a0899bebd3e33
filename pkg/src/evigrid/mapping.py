"""Evidential voxel map, belief / multi-layer grids and the map builders."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numba
import numpy as np

from .core import PointCloud, PoseSE3, ScanSequence, transform_cloud
from .evidential import DEFAULT_EVIDENCE, SensorEvidenceConfig, combine_counts
from .ground import DISCARDED, GROUND, NON_GROUND, PlaneParams, classify_points, fit_plane
from .spatial import GridGeometry, VoxelGeometry, _walk, _walk_len

log = logging.getLogger(__name__)

_BITS = 21
_BIAS = 1 << (_BITS - 1)
_MASK = (1 << _BITS) - 1


def pack_keys(idx: np.ndarray) -> np.ndarray:
    """Pack ``(N, 3)`` voxel indices into sortable int64 keys (x-major order)."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < -_BIAS or idx.max() >= _BIAS):
        raise ValueError("voxel index outside the representable range")
    b = idx + _BIAS
    return (b[:, 0] << (2 * _BITS)) | (b[:, 1] << _BITS) | b[:, 2]


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    out = np.empty((len(keys), 3), np.int64)
    out[:, 0] = (keys >> (2 * _BITS)) & _MASK
    out[:, 1] = (keys >> _BITS) & _MASK
    out[:, 2] = keys & _MASK
    return out - _BIAS


@numba.njit(cache=True)
def _pack1(ix, iy, iz):
    return ((ix + _BIAS) << (2 * _BITS)) | ((iy + _BIAS) << _BITS) | (iz + _BIAS)


@numba.njit(cache=True)
def _ray_keys_3d(starts, ends, offsets, refl, trans):
    """Packed keys of endpoint voxels into ``refl`` and prior voxels into ``trans``."""
    maxlen = 1
    for r in range(starts.shape[0]):
        maxlen = max(maxlen, _walk_len(starts[r], ends[r]))
    buf = np.empty((maxlen, 3), np.int64)
    for r in range(starts.shape[0]):
        n = _walk(starts[r], ends[r], buf)
        o = offsets[r]
        for k in range(n - 1):
            trans[o + k] = _pack1(buf[k, 0], buf[k, 1], buf[k, 2])
        refl[r] = _pack1(buf[n - 1, 0], buf[n - 1, 1], buf[n - 1, 2])


def _count_unique(keys: np.ndarray):
    if len(keys) == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    u, c = np.unique(keys, return_counts=True)
    return u, c.astype(np.int64)


class EvidentialVoxelMap:
    """Sparse voxel grid of reflection (``m``) and transmission (``n``) counts.

    Stored voxels are kept sorted by packed key, so two maps with the same
    counts have identical arrays regardless of insertion order.
    """

    def __init__(self, edge: float = 0.125, origin=(0.0, 0.0, 0.0)):
        self.geometry = VoxelGeometry(float(edge), tuple(float(v) for v in origin))
        self.keys = np.empty(0, np.int64)
        self.m = np.empty(0, np.int64)
        self.n = np.empty(0, np.int64)
        self.skipped_rays = 0

    @property
    def edge(self) -> float:
        return self.geometry.edge

    @property
    def origin(self) -> tuple:
        return self.geometry.origin

    def __len__(self) -> int:
        return len(self.keys)

    def copy(self) -> "EvidentialVoxelMap":
        out = EvidentialVoxelMap(self.edge, self.origin)
        out.keys, out.m, out.n = self.keys.copy(), self.m.copy(), self.n.copy()
        out.skipped_rays = self.skipped_rays
        return out

    def compatible(self, other: "EvidentialVoxelMap") -> bool:
        return self.geometry == other.geometry

    def indices(self) -> np.ndarray:
        return unpack_keys(self.keys)

    def centers(self) -> np.ndarray:
        return self.geometry.center_of(self.indices())

    @property
    def total_reflections(self) -> int:
        return int(self.m.sum())

    @property
    def total_transmissions(self) -> int:
        return int(self.n.sum())

    def masses(self, cfg: SensorEvidenceConfig = DEFAULT_EVIDENCE):
        return combine_counts(self.m, self.n, cfg)

    def counts_at(self, idx) -> tuple[int, int]:
        key = pack_keys(np.asarray(idx).reshape(1, 3))[0]
        pos = np.searchsorted(self.keys, key)
        if pos < len(self.keys) and self.keys[pos] == key:
            return int(self.m[pos]), int(self.n[pos])
        return 0, 0

    def add_counts(self, keys, m, n) -> None:
        """Merge per-key count increments (keys need not be unique or sorted)."""
        keys = np.concatenate([self.keys, np.asarray(keys, np.int64)])
        m = np.concatenate([self.m, np.asarray(m, np.int64)])
        n = np.concatenate([self.n, np.asarray(n, np.int64)])
        u, inv = np.unique(keys, return_inverse=True)
        mm = np.zeros(len(u), np.int64)
        nn = np.zeros(len(u), np.int64)
        np.add.at(mm, inv, m)
        np.add.at(nn, inv, n)
        keep = (mm + nn) > 0
        self.keys, self.m, self.n = u[keep], mm[keep], nn[keep]

    def merge(self, other: "EvidentialVoxelMap") -> None:
        if not self.compatible(other):
            raise ValueError("voxel maps have different geometry")
        self.add_counts(other.keys, other.m, other.n)
        self.skipped_rays += other.skipped_rays

    def filtered(self, mask: np.ndarray) -> "EvidentialVoxelMap":
        out = EvidentialVoxelMap(self.edge, self.origin)
        out.keys, out.m, out.n = self.keys[mask], self.m[mask], self.n[mask]
        out.skipped_rays = self.skipped_rays
        return out

    def insert_rays(self, origin: np.ndarray, endpoints: np.ndarray, chunk_voxels: int = 4_000_000) -> None:
        """Raycast from ``origin`` to each endpoint (reference-frame meters)."""
        ends = np.asarray(endpoints, dtype=np.float64).reshape(-1, 3)
        origin = np.asarray(origin, dtype=np.float64).reshape(3)
        zero = np.all(ends == origin, axis=1)
        if zero.any():
            self.skipped_rays += int(zero.sum())
            ends = ends[~zero]
        if len(ends) == 0:
            return
        go = np.asarray(self.origin)
        u1 = (ends - go) / self.edge
        u0 = np.broadcast_to((origin - go) / self.edge, u1.shape).copy()
        # walks stay inside the endpoints' bounding box, so checking the ends suffices
        lo = min(np.floor(u1).min(), np.floor(u0[0]).min())
        hi = max(np.floor(u1).max(), np.floor(u0[0]).max())
        if lo < -_BIAS or hi >= _BIAS:
            raise ValueError("ray leaves the representable voxel index range")
        steps = np.abs(np.floor(u1) - np.floor(u0)).sum(axis=1).astype(np.int64)
        refl_parts, trans_parts = [], []
        start = 0
        while start < len(ends):
            csum = np.cumsum(steps[start:])
            stop = start + max(1, int(np.searchsorted(csum, chunk_voxels, side="right")))
            s = steps[start:stop]
            offsets = np.concatenate([[0], np.cumsum(s)[:-1]]).astype(np.int64)
            refl = np.empty(stop - start, np.int64)
            trans = np.empty(int(s.sum()), np.int64)
            _ray_keys_3d(u0[start:stop], u1[start:stop], offsets, refl, trans)
            refl_parts.append(_count_unique(refl))
            trans_parts.append(_count_unique(trans))
            start = stop
        rk = np.concatenate([p[0] for p in refl_parts])
        rc = np.concatenate([p[1] for p in refl_parts])
        tk = np.concatenate([p[0] for p in trans_parts])
        tc = np.concatenate([p[1] for p in trans_parts])
        self.add_counts(
            np.concatenate([rk, tk]),
            np.concatenate([rc, np.zeros(len(tk), np.int64)]),
            np.concatenate([np.zeros(len(rk), np.int64), tc]),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, EvidentialVoxelMap):
            return NotImplemented
        return (
            self.geometry == other.geometry
            and np.array_equal(self.keys, other.keys)
            and np.array_equal(self.m, other.m)
            and np.array_equal(self.n, other.n)
        )

    def __repr__(self) -> str:
        return f"EvidentialVoxelMap(edge={self.edge}, voxels={len(self)}, m={self.total_reflections}, n={self.total_transmissions})"


def accumulate_scan(vmap: EvidentialVoxelMap, scan: PointCloud, pose: PoseSE3) -> EvidentialVoxelMap:
    """Insert one scan (in its own frame) registered by ``pose`` into ``vmap`` in place."""
    world = transform_cloud(scan, pose)
    vmap.insert_rays(world.sensor_origin, world.points)
    return vmap


def segment_corridor(vmap: EvidentialVoxelMap, plane: PlaneParams, low: float = 0.2, high: float = 3.0) -> EvidentialVoxelMap:
    """Keep voxels whose center lies between ``low`` and ``high`` above the plane."""
    h = plane.signed_height(vmap.centers()) if len(vmap) else np.empty(0)
    return vmap.filtered((h >= low) & (h <= high))


# -- 2D grids ----------------------------------------------------------------

@dataclass(eq=False)
class BeliefGrid:
    geometry: GridGeometry
    bel_O: np.ndarray
    bel_F: np.ndarray

    def __post_init__(self):
        self.bel_O = np.asarray(self.bel_O, dtype=np.float64)
        self.bel_F = np.asarray(self.bel_F, dtype=np.float64)
        if self.bel_O.shape != self.geometry.shape or self.bel_F.shape != self.geometry.shape:
            raise ValueError("belief channels do not match grid geometry")

    @classmethod
    def empty(cls, geometry: GridGeometry) -> "BeliefGrid":
        return cls(geometry, np.zeros(geometry.shape), np.zeros(geometry.shape))

    @property
    def theta(self) -> np.ndarray:
        return 1.0 - self.bel_O - self.bel_F

    @property
    def certainty(self) -> np.ndarray:
        return self.bel_O + self.bel_F

    def layers(self) -> dict:
        return {"bel_O": self.bel_O, "bel_F": self.bel_F}

    def determinate(self, threshold: float = 0.5) -> np.ndarray:
        return self.certainty > threshold

    def validate(self, tol: float = 1e-12) -> "BeliefGrid":
        o, f = self.bel_O, self.bel_F
        if (o < -tol).any() or (f < -tol).any() or (o > 1 + tol).any() or (f > 1 + tol).any():
            raise ValueError("belief outside [0, 1]")
        if (o + f > 1 + tol).any():
            raise ValueError("bel_O + bel_F exceeds one")
        return self

    def __eq__(self, other) -> bool:
        if not isinstance(other, BeliefGrid):
            return NotImplemented
        return (
            self.geometry == other.geometry
            and np.array_equal(self.bel_O, other.bel_O)
            and np.array_equal(self.bel_F, other.bel_F)
        )


INPUT_LAYERS = (
    "detections_ground",
    "detections_non_ground",
    "transmissions_ground",
    "transmissions_non_ground",
    "intensity_ground",
    "intensity_non_ground",
)


@dataclass(eq=False)
class MultiLayerGridMap:
    geometry: GridGeometry
    layers: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, arr in self.layers.items():
            if np.shape(arr) != self.geometry.shape:
                raise ValueError(f"layer {name} does not match grid geometry")

    @classmethod
    def empty(cls, geometry: GridGeometry) -> "MultiLayerGridMap":
        layers = {}
        for name in INPUT_LAYERS:
            dtype = np.float64 if name.startswith("intensity") else np.int64
            layers[name] = np.zeros(geometry.shape, dtype)
        return cls(geometry, layers)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.layers[name]

    def __eq__(self, other) -> bool:
        if not isinstance(other, MultiLayerGridMap):
            return NotImplemented
        return (
            self.geometry == other.geometry
            and self.layers.keys() == other.layers.keys()
            and all(np.array_equal(self.layers[k], other.layers[k]) for k in self.layers)
        )


def project_to_grid(vmap: EvidentialVoxelMap, geometry: GridGeometry,
                    cfg: SensorEvidenceConfig = DEFAULT_EVIDENCE) -> BeliefGrid:
    """Reduce every pillar of stored voxels to ``(bel_O, bel_F)``; empty pillars give ``(0, 0)``."""
    grid = BeliefGrid.empty(geometry)
    if len(vmap) == 0:
        return grid
    cell = geometry.index_of(vmap.centers()[:, :2])
    inside = geometry.contains(cell)
    m_O, m_F, _ = vmap.masses(cfg)
    cell, m_O, m_F = cell[inside], m_O[inside], m_F[inside]
    if len(cell) == 0:
        return grid
    flat = cell[:, 1] * geometry.width + cell[:, 0]
    order = np.argsort(flat, kind="stable")
    flat, m_O, m_F = flat[order], m_O[order], m_F[order]
    starts = np.flatnonzero(np.r_[True, flat[1:] != flat[:-1]])
    cells = flat[starts]
    bel_F = np.multiply.reduceat(m_F, starts)
    bel_O = 1.0 - np.multiply.reduceat(1.0 - m_O, starts)
    grid.bel_O.reshape(-1)[cells] = bel_O
    grid.bel_F.reshape(-1)[cells] = bel_F
    return grid


@dataclass(frozen=True)
class TargetParams:
    window: float = 2.0
    corridor_low: float = 0.2
    corridor_high: float = 3.0
    voxel_edge: float = 0.125
    ground_scale: float = 0.05
    ground_band: float = 0.2
    multipath_cutoff: float = -0.2
    evidence: SensorEvidenceConfig = DEFAULT_EVIDENCE


@dataclass
class TargetBuild:
    grid: BeliefGrid
    voxel_map: EvidentialVoxelMap
    corridor: EvidentialVoxelMap
    plane: PlaneParams
    scan_ids: list


def window_indices(seq: ScanSequence, center: str, window: float) -> list:
    c = seq.index_of(center)
    t_c = seq.scans[c].timestamp
    idx = [i for i, s in enumerate(seq.scans) if abs(s.timestamp - t_c) <= window + 1e-9]
    if not idx:
        raise ValueError("no scans inside the time window")
    return idx


def build_voxel_map(seq: ScanSequence, center: str, geometry: GridGeometry,
                    params: TargetParams = TargetParams(), scan_indices: Optional[Sequence[int]] = None,
                    plane: Optional[PlaneParams] = None, executor=None):
    """Accumulate the scans around ``center`` in the center scan's frame.

    Returns ``(voxel_map, plane, used_indices)``.
    """
    if seq.poses is None:
        raise ValueError("sequence has no poses; register it first")
    c = seq.index_of(center)
    # sorted so any permutation of scan_indices gives bit-identical output
    idx = sorted(set(scan_indices)) if scan_indices is not None else window_indices(seq, center, params.window)
    if not idx:
        raise ValueError("no scans to accumulate")
    to_center = seq.poses[c].inverse()
    clouds = [transform_cloud(seq.scans[i], to_center @ seq.poses[i]) for i in idx]
    if plane is None:
        plane = fit_plane(np.concatenate([cl.points for cl in clouds]), params.ground_scale)

    origin = (geometry.origin[0], geometry.origin[1], 0.0)

    def one(cl: PointCloud) -> EvidentialVoxelMap:
        keep = classify_points(cl.points, plane, params.ground_band, params.multipath_cutoff) != DISCARDED
        part = EvidentialVoxelMap(params.voxel_edge, origin)
        part.insert_rays(cl.sensor_origin, cl.points[keep])
        return part

    parts = list(executor.map(one, clouds)) if executor is not None else [one(cl) for cl in clouds]
    vmap = EvidentialVoxelMap(params.voxel_edge, origin)
    for p in parts:
        vmap.merge(p)
    return vmap, plane, idx


def build_target_grid(seq: ScanSequence, center: str, geometry: Optional[GridGeometry] = None,
                      params: TargetParams = TargetParams(), scan_indices: Optional[Sequence[int]] = None,
                      plane: Optional[PlaneParams] = None, executor=None, details: bool = False):
    """Two-channel belief grid for one scan from its registered neighbors in time.

    The grid is expressed in the frame of the center scan.
    """
    geometry = geometry or GridGeometry.centered(100.0, params.voxel_edge)
    vmap, plane, idx = build_voxel_map(seq, center, geometry, params, scan_indices, plane, executor)
    corridor = segment_corridor(vmap, plane, params.corridor_low, params.corridor_high)
    grid = project_to_grid(corridor, geometry, params.evidence)
    if details:
        return TargetBuild(grid, vmap, corridor, plane, [seq.scans[i].scan_id for i in idx])
    return grid


# -- single-scan input grid --------------------------------------------------

@numba.njit(cache=True)
def _input_rays(ox, oy, ends, inten, edge, gx, gy, width, height, det, trans, isum):
    start = np.empty(2)
    end = np.empty(2)
    start[0] = (ox - gx) / edge
    start[1] = (oy - gy) / edge
    maxlen = 1
    for r in range(ends.shape[0]):
        end[0] = (ends[r, 0] - gx) / edge
        end[1] = (ends[r, 1] - gy) / edge
        maxlen = max(maxlen, _walk_len(start, end))
    buf = np.empty((maxlen, 2), np.int64)
    for r in range(ends.shape[0]):
        end[0] = (ends[r, 0] - gx) / edge
        end[1] = (ends[r, 1] - gy) / edge
        n = _walk(start, end, buf)
        for k in range(n - 1):
            ix = buf[k, 0]
            iy = buf[k, 1]
            if 0 <= ix < width and 0 <= iy < height:
                trans[iy, ix] += 1
        ix = buf[n - 1, 0]
        iy = buf[n - 1, 1]
        if 0 <= ix < width and 0 <= iy < height:
            det[iy, ix] += 1
            isum[iy, ix] += inten[r]


def build_input_grid(scan: PointCloud, plane: PlaneParams, geometry: Optional[GridGeometry] = None,
                     ground_band: float = 0.2, multipath_cutoff: float = -0.2) -> MultiLayerGridMap:
    """Six-layer grid of detections, transmissions and mean intensity per point family.

    Rays are cast in the xy projection from the sensor origin; ground and
    non-ground points only touch their own layer family.
    """
    geometry = geometry or GridGeometry.centered()
    out = MultiLayerGridMap.empty(geometry)
    labels = classify_points(scan.points, plane, ground_band, multipath_cutoff)
    ox, oy = float(scan.sensor_origin[0]), float(scan.sensor_origin[1])
    gx, gy = float(geometry.origin[0]), float(geometry.origin[1])
    for label, suffix in ((GROUND, "ground"), (NON_GROUND, "non_ground")):
        sel = labels == label
        pts = np.ascontiguousarray(scan.points[sel, :2])
        inten = np.ascontiguousarray(scan.intensity[sel])
        det = out.layers[f"detections_{suffix}"]
        trans = out.layers[f"transmissions_{suffix}"]
        isum = np.zeros(geometry.shape)
        _input_rays(ox, oy, pts, inten, float(geometry.edge), gx, gy, geometry.width, geometry.height, det, trans, isum)
        mean = out.layers[f"intensity_{suffix}"]
        hit = det > 0
        mean[hit] = isum[hit] / det[hit]
    return out


# -- augmentation ------------------------------------------------------------

def augment_crop(grid, rotation: float = 0.0, offset=(0.0, 0.0), out_size: int = 512):
    """Rotate about the grid center, shift by ``offset`` (meters) and crop ``out_size`` cells.

    Nearest-neighbor resampling, so counts stay integral and beliefs stay
    in range. The output frame is the source frame rotated by ``rotation``.
    """
    g = grid.geometry
    edge = g.edge
    center = g.center
    half_out = 0.5 * out_size * edge
    origin_out = center + np.asarray(offset, dtype=np.float64) - half_out
    c, s = np.cos(rotation), np.sin(rotation)
    R = np.array([[c, -s], [s, c]])

    lo = np.asarray(g.origin, dtype=np.float64)
    hi = lo + edge * np.array([g.width, g.height])
    corners = origin_out + out_size * edge * np.array([[0, 0], [1, 0], [0, 1], [1, 1]], dtype=np.float64)
    src = (corners - center) @ R.T + center
    tol = 1e-9 * max(1.0, float(np.max(np.abs(hi - lo))))
    if (src < lo - tol).any() or (src > hi + tol).any():
        raise ValueError("crop window exceeds the source grid")

    ii = np.arange(out_size)
    cx = origin_out[0] + (ii + 0.5) * edge
    cy = origin_out[1] + (ii + 0.5) * edge
    X, Y = np.meshgrid(cx, cy)  # [iy, ix]
    dx, dy = X - center[0], Y - center[1]
    sx = R[0, 0] * dx + R[0, 1] * dy + center[0]
    sy = R[1, 0] * dx + R[1, 1] * dy + center[1]
    ix = np.clip(np.floor((sx - lo[0]) / edge).astype(np.int64), 0, g.width - 1)
    iy = np.clip(np.floor((sy - lo[1]) / edge).astype(np.int64), 0, g.height - 1)
    geo = GridGeometry(out_size, out_size, edge, (float(origin_out[0]), float(origin_out[1])))

    if isinstance(grid, BeliefGrid):
        return BeliefGrid(geo, grid.bel_O[iy, ix], grid.bel_F[iy, ix])
    return MultiLayerGridMap(geo, {k: v[iy, ix] for k, v in grid.layers.items()})
