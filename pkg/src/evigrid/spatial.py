"""Neighbor search, local covariances and exact grid traversal kernels."""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.spatial import cKDTree


class NeighborIndex:
    """Exact k-NN over a fixed point set.

    Results are sorted by ascending distance, ties broken by ascending point
    index, so queries are reproducible and comparable with a linear scan.
    """

    def __init__(self, points):
        pts = np.array(points, dtype=np.float64)
        if pts.ndim != 2 or len(pts) == 0:
            raise ValueError("cannot build a neighbor index over an empty point set")
        self.points = pts
        self.points.setflags(write=False)
        self._tree = cKDTree(pts, balanced_tree=True, compact_nodes=True)

    def __len__(self) -> int:
        return len(self.points)

    def knn(self, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(distances, indices)`` of shape ``(Q, min(k, N))``."""
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        n = len(self.points)
        k = min(int(k), n)
        if k <= 0:
            raise ValueError("k must be positive")
        # one extra neighbor reveals whether a tie straddles the k boundary
        kq = min(k + 1, n)
        _, idx = self._tree.query(q, k=kq)
        idx = np.asarray(idx).reshape(len(q), kq)
        dist = self._exact_dist(q, idx)
        order = np.lexsort((idx, dist), axis=-1)
        idx = np.take_along_axis(idx, order, axis=1)
        dist = np.take_along_axis(dist, order, axis=1)

        if kq > k:
            tied = dist[:, k] == dist[:, k - 1]
            for row in np.flatnonzero(tied):
                idx[row, :k], dist[row, :k] = self._resolve_ties(q[row], dist[row, k - 1], k)
        return dist[:, :k], idx[:, :k]

    def _exact_dist(self, q, idx):
        diff = self.points[idx] - q[:, None, :]
        return np.sqrt(np.einsum("qkd,qkd->qk", diff, diff))

    def _resolve_ties(self, q, radius, k):
        cand = np.asarray(self._tree.query_ball_point(q, radius * (1 + 1e-9) + 1e-300))
        d = self._exact_dist(q[None], cand[None])[0]
        order = np.lexsort((cand, d))[:k]
        return cand[order], d[order]

    def nearest(self, queries) -> tuple[np.ndarray, np.ndarray]:
        d, i = self.knn(queries, 1)
        return d[:, 0], i[:, 0]


def build_index(points) -> NeighborIndex:
    return NeighborIndex(points)


def estimate_covariances(points, k: int = 10, epsilon: float = 1e-3, index: NeighborIndex | None = None) -> np.ndarray:
    """Per-point plane-regularized covariances from the ``k`` nearest neighbors.

    The sample covariance eigenvalues are replaced by ``(1, 1, epsilon)``
    (largest two set to one, smallest to ``epsilon``), keeping the eigenbasis.
    Returns an ``(N, 3, 3)`` array.
    """
    pts = np.asarray(getattr(points, "points", points), dtype=np.float64)
    if len(pts) < k:
        raise ValueError(f"need at least {k} points, got {len(pts)}")
    index = index or NeighborIndex(pts)
    _, nbr = index.knn(pts, k)
    nb = pts[nbr]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / max(k - 1, 1)
    _, vecs = np.linalg.eigh(cov)  # ascending eigenvalues
    spectrum = np.array([epsilon, 1.0, 1.0])
    reg = np.einsum("nij,j,nkj->nik", vecs, spectrum, vecs)
    return 0.5 * (reg + np.transpose(reg, (0, 2, 1)))


def normals_from_covariances(cov: np.ndarray) -> np.ndarray:
    _, vecs = np.linalg.eigh(cov)
    return vecs[:, :, 0]


@dataclass(frozen=True)
class VoxelGeometry:
    edge: float = 0.125
    origin: tuple = (0.0, 0.0, 0.0)

    def index_of(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return np.floor((p - np.asarray(self.origin)) / self.edge).astype(np.int64)

    def center_of(self, idx) -> np.ndarray:
        return (np.asarray(idx, dtype=np.float64) + 0.5) * self.edge + np.asarray(self.origin)


@dataclass(frozen=True)
class GridGeometry:
    """Planar grid; arrays are indexed ``[iy, ix]`` with shape ``(height, width)``."""

    width: int = 800
    height: int = 800
    edge: float = 0.125
    origin: tuple = field(default=(-50.0, -50.0))

    @classmethod
    def centered(cls, extent: float = 100.0, edge: float = 0.125, center=(0.0, 0.0)) -> "GridGeometry":
        cells = int(round(extent / edge))
        half = cells * edge / 2.0
        return cls(cells, cells, edge, (center[0] - half, center[1] - half))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.origin) + 0.5 * self.edge * np.array([self.width, self.height])

    def index_of(self, xy) -> np.ndarray:
        p = np.asarray(xy, dtype=np.float64)
        return np.floor((p - np.asarray(self.origin)) / self.edge).astype(np.int64)

    def center_of(self, idx) -> np.ndarray:
        return (np.asarray(idx, dtype=np.float64) + 0.5) * self.edge + np.asarray(self.origin)

    def contains(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        return (idx[..., 0] >= 0) & (idx[..., 0] < self.width) & (idx[..., 1] >= 0) & (idx[..., 1] < self.height)

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height, "cell_edge": self.edge, "origin": list(self.origin)}


# -- traversal kernels -------------------------------------------------------
#
# Inputs are in grid units (origin subtracted, divided by edge). Each axis
# gets a fixed number of steps |floor(end) - floor(start)|, so the walk ends
# exactly in the endpoint voxel regardless of rounding in the crossing times.
# Ties between axes step the lower axis first.


@numba.njit(cache=True)
def _setup_axis(u0, u1):
    i0 = np.floor(u0)
    i1 = np.floor(u1)
    if i1 > i0:
        d = u1 - u0
        return int(i0), 1, int(i1 - i0), (i0 + 1.0 - u0) / d, 1.0 / d
    elif i1 < i0:
        d = u0 - u1
        return int(i0), -1, int(i0 - i1), (u0 - i0) / d, 1.0 / d
    return int(i0), 0, 0, np.inf, np.inf


@numba.njit(cache=True)
def _walk_len(start, end):
    n = 1
    for a in range(start.shape[0]):
        n += abs(int(np.floor(end[a])) - int(np.floor(start[a])))
    return n


@numba.njit(cache=True)
def _walk(start, end, out):
    """Write the visited voxel indices of one ray into ``out``; return count."""
    dim = start.shape[0]
    cur = np.empty(dim, np.int64)
    step = np.empty(dim, np.int64)
    left = np.empty(dim, np.int64)
    tmax = np.empty(dim, np.float64)
    tdel = np.empty(dim, np.float64)
    total = 0
    for a in range(dim):
        c, s, n, tm, td = _setup_axis(start[a], end[a])
        cur[a] = c
        step[a] = s
        left[a] = n
        tmax[a] = tm
        tdel[a] = td
        total += n
    for a in range(dim):
        out[0, a] = cur[a]
    for k in range(1, total + 1):
        best = -1
        for a in range(dim):
            if left[a] > 0 and (best < 0 or tmax[a] < tmax[best]):
                best = a
        cur[best] += step[best]
        left[best] -= 1
        tmax[best] += tdel[best]
        for a in range(dim):
            out[k, a] = cur[a]
    return total + 1


def _traverse(origin, endpoint, grid_origin, edge, dim):
    o = np.asarray(origin, dtype=np.float64).reshape(-1)[:dim]
    e = np.asarray(endpoint, dtype=np.float64).reshape(-1)[:dim]
    if not (np.all(np.isfinite(o)) and np.all(np.isfinite(e))):
        raise ValueError("ray endpoints must be finite")
    if np.array_equal(o, e):
        raise ValueError("zero-length ray")
    go = np.asarray(grid_origin, dtype=np.float64)[:dim]
    u0 = (o - go) / edge
    u1 = (e - go) / edge
    out = np.empty((_walk_len(u0, u1), dim), np.int64)
    n = _walk(u0, u1, out)
    return out[:n]


def traverse_voxels_3d(origin, endpoint, grid: VoxelGeometry = VoxelGeometry()) -> np.ndarray:
    """Voxels crossed by the segment ``origin -> endpoint``, in order, endpoint voxel last.

    Consecutive entries are face-adjacent. Points on a voxel face belong to
    the voxel with the larger index.
    """
    return _traverse(origin, endpoint, grid.origin, grid.edge, 3)


def traverse_cells_2d(origin_xy, endpoint_xy, grid: GridGeometry | VoxelGeometry = GridGeometry()) -> np.ndarray:
    """2D analogue of :func:`traverse_voxels_3d`; returns ``(K, 2)`` ``(ix, iy)`` indices."""
    return _traverse(origin_xy, endpoint_xy, grid.origin, grid.edge, 2)


@numba.njit(cache=True)
def ray_lengths(starts, ends):
    """Number of voxels/cells visited per ray (grid units input)."""
    n = starts.shape[0]
    out = np.empty(n, np.int64)
    for r in range(n):
        out[r] = _walk_len(starts[r], ends[r])
    return out


@numba.njit(cache=True)
def walk_many(starts, ends, offsets, out):
    """Walk every ray into the flat ``out`` buffer at ``offsets[r]``."""
    for r in range(starts.shape[0]):
        _walk(starts[r], ends[r], out[offsets[r]:])
