"""Batched GICP registration and the two-stage sequence pipeline.

Within a batch the first scan is the fixed reference; every other pose maps
its scan into the reference frame. Correspondences are searched between
adjacent scans and between the first and the last scan of the batch. Adjacent
and closing relative poses of all batches then feed a multi-edge pose graph.
"""
from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .core import PoseSE3, ScanSequence
from .posegraph import PoseGraph, optimize_pose_graph, retract
from .spatial import NeighborIndex, estimate_covariances

log = logging.getLogger(__name__)


class NoCorrespondencesError(RuntimeError):
    """No point pairs within the gate: the estimate diverged or the scans are disjoint."""


class RegistrationWarning(UserWarning):
    pass


@dataclass
class ScanData:
    """A scan prepared for GICP: points, regularized covariances and a local index."""

    points: np.ndarray
    covariances: np.ndarray
    index: NeighborIndex

    @classmethod
    def prepare(cls, cloud, k: int = 10, epsilon: float = 1e-3) -> "ScanData":
        pts = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
        index = NeighborIndex(pts)
        return cls(pts, estimate_covariances(pts, k, epsilon, index=index), index)


class Correspondences(NamedTuple):
    src: np.ndarray  # indices into scan a
    tgt: np.ndarray  # indices into scan b
    weights: np.ndarray  # (K, 3, 3) whitening W with W^T W = inv(combined covariance)


def _whitening(cov: np.ndarray) -> np.ndarray:
    L = np.linalg.cholesky(np.linalg.inv(cov))
    return np.transpose(L, (0, 2, 1))


def find_correspondences(a: ScanData, b: ScanData, Ta: PoseSE3, Tb: PoseSE3, max_dist: float) -> Correspondences:
    """Nearest neighbor in ``b`` for every point of ``a`` within ``max_dist``.

    Searching in b's own frame is equivalent to searching in the reference
    frame since distances are preserved by rigid motion.
    """
    rel = Tb.inverse() @ Ta
    d, nn = b.index.nearest(rel.apply(a.points))
    keep = d <= max_dist
    src = np.flatnonzero(keep)
    tgt = nn[keep]
    Ra, Rb = Ta.R, Tb.R
    cov = Rb @ b.covariances[tgt] @ Rb.T + Ra @ a.covariances[src] @ Ra.T
    return Correspondences(src, tgt, _whitening(cov))


def pair_residuals(a: ScanData, b: ScanData, Ta: PoseSE3, Tb: PoseSE3, corr: Correspondences) -> np.ndarray:
    """Whitened residuals ``W (T_b q - T_a p)``, shape ``(K, 3)``."""
    d = Tb.apply(b.points[corr.tgt]) - Ta.apply(a.points[corr.src])
    return np.einsum("kij,kj->ki", corr.weights, d)


def pair_jacobians(a: ScanData, b: ScanData, Ta: PoseSE3, Tb: PoseSE3, corr: Correspondences):
    """Residuals and ``(K, 3, 6)`` Jacobians w.r.t. the ``(rho, phi)`` increments of a and b."""
    r = pair_residuals(a, b, Ta, Tb, corr)
    W = corr.weights
    rp = a.points[corr.src] @ Ta.R.T
    rq = b.points[corr.tgt] @ Tb.R.T

    def block(x):
        J = np.zeros((len(x), 3, 6))
        J[:, :, :3] = np.eye(3)
        J[:, 0, 4], J[:, 0, 5] = x[:, 2], -x[:, 1]
        J[:, 1, 3], J[:, 1, 5] = -x[:, 2], x[:, 0]
        J[:, 2, 3], J[:, 2, 4] = x[:, 1], -x[:, 0]
        return J

    Ja = -np.einsum("kij,kjl->kil", W, block(rp))
    Jb = np.einsum("kij,kjl->kil", W, block(rq))
    return r, Ja, Jb


def gicp_align_pair_residuals(a, b, T: PoseSE3 = PoseSE3(), max_dist: float = 1.0, k: int = 10,
                              epsilon: float = 1e-3) -> np.ndarray:
    """GICP residuals of cloud ``a`` mapped by ``T`` against cloud ``b``.

    Accepts point arrays, clouds or prepared :class:`ScanData`.
    """
    a = a if isinstance(a, ScanData) else ScanData.prepare(a, k, epsilon)
    b = b if isinstance(b, ScanData) else ScanData.prepare(b, k, epsilon)
    corr = find_correspondences(a, b, T, PoseSE3(), max_dist)
    if len(corr.src) == 0:
        raise NoCorrespondencesError("no correspondences within the gate")
    return pair_residuals(a, b, T, PoseSE3(), corr)


def batch_pairs(n: int) -> list:
    pairs = [(i, i + 1) for i in range(n - 1)]
    if n > 2:
        pairs.append((0, n - 1))
    return pairs


@dataclass
class GicpBatchProblem:
    scans: list
    initial_poses: Optional[list] = None
    max_correspondence_distance: float = 1.0
    pairs: Optional[list] = None
    max_iterations: int = 50
    cost_tol: float = 1e-8
    step_tol: float = 1e-10
    initial_damping: float = 1e-4

    def __post_init__(self):
        if len(self.scans) < 2:
            raise ValueError("a batch needs at least two scans")
        self.scans = [s if isinstance(s, ScanData) else ScanData.prepare(s) for s in self.scans]
        if self.initial_poses is None:
            self.initial_poses = [PoseSE3() for _ in self.scans]
        if len(self.initial_poses) != len(self.scans):
            raise ValueError("one initial pose per scan required")
        if self.pairs is None:
            self.pairs = batch_pairs(len(self.scans))


@dataclass
class BatchResult:
    poses: list
    converged: bool
    iterations: int
    cost: float
    correspondences: int
    history: list = field(default_factory=list)  # accepted costs, one list per association


def associate(problem: GicpBatchProblem, poses) -> dict:
    out = {}
    for a, b in problem.pairs:
        out[(a, b)] = find_correspondences(
            problem.scans[a], problem.scans[b], poses[a], poses[b], problem.max_correspondence_distance
        )
    return out


def batch_cost(problem: GicpBatchProblem, poses, corrs: dict) -> float:
    total = 0.0
    for (a, b), c in corrs.items():
        r = pair_residuals(problem.scans[a], problem.scans[b], poses[a], poses[b], c)
        total += float(np.einsum("ki,ki->", r, r))
    return total


def batch_residual_vector(problem: GicpBatchProblem, poses, corrs: dict) -> np.ndarray:
    parts = [pair_residuals(problem.scans[a], problem.scans[b], poses[a], poses[b], c).ravel()
             for (a, b), c in corrs.items()]
    return np.concatenate(parts) if parts else np.empty(0)


def batch_jacobian(problem: GicpBatchProblem, poses, corrs: dict) -> np.ndarray:
    """Dense Jacobian of :func:`batch_residual_vector` w.r.t. the free pose increments."""
    n_free = len(poses) - 1
    rows = []
    for (a, b), c in corrs.items():
        _, Ja, Jb = pair_jacobians(problem.scans[a], problem.scans[b], poses[a], poses[b], c)
        J = np.zeros((len(c.src) * 3, 6 * n_free))
        if a > 0:
            J[:, 6 * (a - 1):6 * a] += Ja.reshape(-1, 6)
        if b > 0:
            J[:, 6 * (b - 1):6 * b] += Jb.reshape(-1, 6)
        rows.append(J)
    return np.vstack(rows)


def _normal_equations(problem: GicpBatchProblem, poses, corrs: dict):
    n_free = len(poses) - 1
    H = np.zeros((6 * n_free, 6 * n_free))
    g = np.zeros(6 * n_free)
    cost = 0.0
    for (a, b), c in corrs.items():
        r, Ja, Jb = pair_jacobians(problem.scans[a], problem.scans[b], poses[a], poses[b], c)
        cost += float(np.einsum("ki,ki->", r, r))
        blocks = [(a, Ja), (b, Jb)]
        for i, Ji in blocks:
            if i == 0:
                continue
            si = slice(6 * (i - 1), 6 * i)
            g[si] += np.einsum("kij,ki->j", Ji, r)
            for j, Jj in blocks:
                if j == 0:
                    continue
                H[si, 6 * (j - 1):6 * j] += np.einsum("kil,kim->lm", Ji, Jj)
    return H, g, cost


def _damping(H: np.ndarray) -> np.ndarray:
    # per-block trace scaling: invariant under a global rotation of the problem
    d = np.empty(len(H))
    diag = np.diag(H)
    for s in range(0, len(H), 3):
        d[s:s + 3] = max(diag[s:s + 3].mean(), 1e-12)
    return np.diag(d)


def register_batch(problem: GicpBatchProblem, inner_iterations: int = 5) -> BatchResult:
    """Levenberg-Marquardt over all non-reference poses of a batch.

    Correspondences (and the covariance weighting) are refreshed at each
    outer iteration and frozen during the inner LM steps.
    """
    poses = list(problem.initial_poses)
    lam = problem.initial_damping
    history = []
    converged = False
    corrs = {}
    cost = np.inf
    it = 0
    for it in range(1, problem.max_iterations + 1):
        corrs = associate(problem, poses)
        if sum(len(c.src) for c in corrs.values()) == 0:
            raise NoCorrespondencesError("no correspondences within the gate in any pair")
        H, g, cost = _normal_equations(problem, poses, corrs)
        history.append([cost])
        if cost == 0.0 or not np.any(g):
            converged = True
            break
        # converged when the first step after re-association barely moves
        first_small = None
        for _ in range(inner_iterations):
            accepted = False
            while lam <= 1e12:
                try:
                    delta = np.linalg.solve(H + lam * _damping(H), -g)
                except np.linalg.LinAlgError:
                    lam *= 10.0
                    continue
                trial = [poses[0]] + [retract(p, delta[6 * k:6 * k + 6]) for k, p in enumerate(poses[1:])]
                trial_cost = batch_cost(problem, trial, corrs)
                if trial_cost <= cost:
                    accepted = True
                    break
                lam *= 10.0
            if not accepted:
                lam = problem.initial_damping
                if first_small is None:
                    first_small = True
                break
            small = (cost - trial_cost) < problem.cost_tol * cost or np.linalg.norm(delta) < problem.step_tol
            poses, lam = trial, max(lam / 10.0, 1e-15)
            H, g, cost = _normal_equations(problem, poses, corrs)
            history[-1].append(cost)
            if first_small is None:
                first_small = small
            if small:
                break
        if first_small:
            converged = True
            break
    n_corr = sum(len(c.src) for c in corrs.values())
    if not converged:
        warnings.warn(f"GICP batch did not converge in {problem.max_iterations} iterations (cost {cost:.6g})",
                      RegistrationWarning, stacklevel=2)
    return BatchResult(poses, converged, it, cost, n_corr, history)


# -- sequence pipeline -------------------------------------------------------

def batch_windows(n: int, batch: int = 6) -> list:
    """Index windows of ``batch`` scans; consecutive windows share one scan."""
    if batch < 2:
        raise ValueError("batch size must be at least 2")
    if n < 2:
        raise ValueError("need at least two scans")
    wins = []
    start = 0
    while start < n - 1:
        wins.append(list(range(start, min(start + batch, n))))
        start += batch - 1
    return wins


@dataclass
class RegistrationParams:
    batch: int = 6
    max_correspondence_distance: float = 1.0
    covariance_k: int = 10
    covariance_epsilon: float = 1e-3
    max_iterations: int = 50
    downsample: float = 0.0  # voxel size for a centroid filter; 0 keeps every point


def voxel_downsample(points: np.ndarray, size: float) -> np.ndarray:
    """One centroid per occupied voxel, ordered by voxel key."""
    if size <= 0:
        return points
    idx = np.floor(points / size).astype(np.int64)
    _, inv, counts = np.unique(idx, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    out = np.zeros((len(counts), 3))
    np.add.at(out, inv, points)
    return out / counts[:, None]


def _register_window(data: list, params: RegistrationParams, guess: Optional[list]) -> BatchResult:
    # chain pairwise solves under a constant-velocity model, then solve jointly
    n = len(data)
    if guess is not None:
        init = list(guess)
    else:
        init = [PoseSE3()]
        motion = PoseSE3()
        for k in range(1, n):
            pair = GicpBatchProblem(
                [data[k - 1], data[k]],
                [PoseSE3(), motion],
                params.max_correspondence_distance,
                max_iterations=params.max_iterations,
            )
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RegistrationWarning)
                motion = register_batch(pair).poses[1]
            init.append(init[-1] @ motion)
    problem = GicpBatchProblem(data, init, params.max_correspondence_distance, max_iterations=params.max_iterations)
    return register_batch(problem)


class SequenceRegistration(NamedTuple):
    sequence: ScanSequence
    batches: list
    graph: PoseGraph
    graph_result: object


def register_sequence(seq: ScanSequence, batch: int = 6, params: Optional[RegistrationParams] = None,
                      threads: int = 1, initial_poses: Optional[Sequence[PoseSE3]] = None, details: bool = False):
    """Register all scans relative to scan 0 (batched GICP, then pose graph)."""
    params = params or RegistrationParams(batch=batch)
    n = len(seq)
    wins = batch_windows(n, params.batch)
    data = [
        ScanData.prepare(voxel_downsample(s.points, params.downsample), params.covariance_k, params.covariance_epsilon)
        for s in seq.scans
    ]

    def job(win):
        guess = None
        if initial_poses is not None:
            ref = initial_poses[win[0]].inverse()
            guess = [ref @ initial_poses[i] for i in win]
        return _register_window([data[i] for i in win], params, guess)

    if threads > 1 and len(wins) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(job, wins))
    else:
        results = [job(w) for w in wins]

    nodes = [PoseSE3()] * n
    for win, res in zip(wins, results):
        base = nodes[win[0]]
        for i, p in zip(win, res.poses):
            nodes[i] = base @ p

    graph = PoseGraph(list(nodes))
    for win, res in zip(wins, results):
        info = np.eye(6) * max(res.correspondences, 1)
        for a, b in batch_pairs(len(win)):
            rel = res.poses[a].inverse() @ res.poses[b]
            graph.add_edge(win[a], win[b], rel, info)
    gres = optimize_pose_graph(graph, details=True)
    out = seq.with_poses(gres.poses)
    if details:
        return SequenceRegistration(out, results, graph, gres)
    return out
