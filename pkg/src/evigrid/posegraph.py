"""Multi-edge pose graph optimization on SE(3).

Edge residual: ``e = (t_E, Log(R_E))`` with ``E = Z^-1 (T_i^-1 T_j)``. Poses are
updated by the decoupled left perturbation ``R <- Exp(phi) R``, ``t <- t + rho``
with the increment ordered ``(rho, phi)``. Node 0 is held fixed.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial.transform import Rotation

from .core import PoseSE3, _quat_mul

log = logging.getLogger(__name__)


class GraphError(ValueError):
    pass


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_log(R: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(R).as_rotvec()


def so3_exp(phi) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(phi, dtype=np.float64)).as_matrix()


def left_jacobian_inv(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-5:
        coef = 1.0 / 12.0 + theta * theta / 720.0
    else:
        coef = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) - 0.5 * K + coef * (K @ K)


def retract(pose: PoseSE3, delta) -> PoseSE3:
    """Apply the increment ``(rho, phi)``."""
    delta = np.asarray(delta, dtype=np.float64)
    dq = Rotation.from_rotvec(delta[3:]).as_quat()
    return PoseSE3(_quat_mul(dq, pose.rotation), pose.t + delta[:3])


@dataclass
class Edge:
    i: int
    j: int
    observation: PoseSE3
    information: np.ndarray = field(default_factory=lambda: np.eye(6))


@dataclass
class PoseGraph:
    nodes: list
    edges: list = field(default_factory=list)

    def add_edge(self, i: int, j: int, observation: PoseSE3, information=None) -> None:
        info = np.eye(6) if information is None else np.asarray(information, dtype=np.float64)
        self.edges.append(Edge(int(i), int(j), observation, info))

    def is_connected(self) -> bool:
        n = len(self.nodes)
        if n == 0:
            return False
        adj = [[] for _ in range(n)]
        for e in self.edges:
            adj[e.i].append(e.j)
            adj[e.j].append(e.i)
        seen = {0}
        todo = deque([0])
        while todo:
            k = todo.popleft()
            for nb in adj[k]:
                if nb not in seen:
                    seen.add(nb)
                    todo.append(nb)
        return len(seen) == n


def edge_residual(Ti: PoseSE3, Tj: PoseSE3, Z: PoseSE3) -> np.ndarray:
    Ri, Rj, Rz = Ti.R, Tj.R, Z.R
    e_t = Rz.T @ (Ri.T @ (Tj.t - Ti.t) - Z.t)
    e_phi = so3_log(Rz.T @ Ri.T @ Rj)
    return np.concatenate([e_t, e_phi])


def edge_jacobians(Ti: PoseSE3, Tj: PoseSE3, Z: PoseSE3):
    """Residual and its Jacobians w.r.t. the increments of node i and node j."""
    e = edge_residual(Ti, Tj, Z)
    A = Z.R.T @ Ti.R.T
    Jinv = left_jacobian_inv(e[3:])
    Ji = np.zeros((6, 6))
    Jj = np.zeros((6, 6))
    Ji[:3, :3] = -A
    Ji[:3, 3:] = A @ skew(Tj.t - Ti.t)
    Ji[3:, 3:] = -Jinv @ A
    Jj[:3, :3] = A
    Jj[3:, 3:] = Jinv @ A
    return e, Ji, Jj


def edge_chi2(graph: PoseGraph, edge: Edge, poses=None) -> float:
    poses = graph.nodes if poses is None else poses
    e = edge_residual(poses[edge.i], poses[edge.j], edge.observation)
    return float(e @ edge.information @ e)


def total_cost(graph: PoseGraph, poses) -> float:
    return sum(edge_chi2(graph, e, poses) for e in graph.edges)


class GraphResult(NamedTuple):
    poses: list
    converged: bool
    iterations: int
    cost: float
    gradient_norm: float


def _normal_equations(graph: PoseGraph, poses):
    n = len(poses) - 1
    rows, cols, vals = [], [], []
    g = np.zeros(6 * n)
    cost = 0.0
    for ed in graph.edges:
        e, Ji, Jj = edge_jacobians(poses[ed.i], poses[ed.j], ed.observation)
        W = ed.information
        cost += float(e @ W @ e)
        blocks = [(ed.i, Ji), (ed.j, Jj)]
        for a, Ja in blocks:
            if a == 0:
                continue
            g[6 * (a - 1):6 * a] += Ja.T @ W @ e
            for b, Jb in blocks:
                if b == 0:
                    continue
                H = Ja.T @ W @ Jb
                r, c = np.meshgrid(np.arange(6) + 6 * (a - 1), np.arange(6) + 6 * (b - 1), indexing="ij")
                rows.append(r.ravel())
                cols.append(c.ravel())
                vals.append(H.ravel())
    if rows:
        H = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(6 * n, 6 * n)).tocsc()
    else:
        H = sp.csc_matrix((6 * n, 6 * n))
    return H, g, cost


def optimize_pose_graph(graph: PoseGraph, max_iter: int = 100, gradient_tol: float = 1e-8,
                        details: bool = False):
    """Gauss-Newton with Levenberg-Marquardt fallback; node 0 stays fixed."""
    if not graph.is_connected():
        raise GraphError("pose graph is disconnected")
    poses = list(graph.nodes)
    if len(poses) == 1:
        res = GraphResult(poses, True, 0, 0.0, 0.0)
        return res if details else res.poses
    lam = 0.0
    it = 0
    gnorm = np.inf
    converged = False
    H, g, cost = _normal_equations(graph, poses)
    diag = H.diagonal()
    if np.any(diag <= 1e-12 * max(float(diag.max()), 1.0)):
        raise GraphError("singular normal equations: some pose components are unconstrained")
    for it in range(1, max_iter + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm < gradient_tol:
            converged = True
            break
        accepted = False
        while not accepted:
            A = H + lam * sp.diags(np.maximum(H.diagonal(), 1e-12)) if lam > 0 else H
            try:
                with np.errstate(all="raise"):
                    lu = spla.splu(A.tocsc())
                    delta = -lu.solve(g)
            except (RuntimeError, FloatingPointError) as exc:
                if lam == 0.0:
                    lam = 1e-4
                    continue
                raise GraphError(f"singular normal equations: {exc}") from exc
            if not np.all(np.isfinite(delta)):
                raise GraphError("singular normal equations")
            trial = [poses[0]] + [retract(p, delta[6 * k:6 * k + 6]) for k, p in enumerate(poses[1:])]
            H_t, g_t, cost_t = _normal_equations(graph, trial)
            if cost_t <= cost:
                poses, H, g, cost = trial, H_t, g_t, cost_t
                lam = 0.0 if lam <= 1e-4 else lam / 10.0
                accepted = True
            else:
                lam = 1e-4 if lam == 0.0 else lam * 10.0
                if lam > 1e12:
                    break
        if not accepted:
            converged = gnorm < 1e3 * gradient_tol
            break
    else:
        gnorm = float(np.linalg.norm(g))
        converged = gnorm < gradient_tol
    if not converged:
        log.warning("pose graph did not converge: gradient norm %.3g after %d iterations", gnorm, it)
    res = GraphResult(poses, converged, it, cost, gnorm)
    return res if details else res.poses
