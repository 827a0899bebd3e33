"""Per-cell losses and grid-level evaluation metrics for belief grids.

Residuals are target minus prediction: ``eps_O = bel(O) - bel'(O)`` and
``eps_F = bel(F) - bel'(F)``, where primed values are predicted.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Optional, Union

import numpy as np

from .mapping import BeliefGrid


class MetricError(ValueError):
    pass


def residuals(pred: BeliefGrid, target: BeliefGrid):
    _check_aligned(pred, target)
    return target.bel_O - pred.bel_O, target.bel_F - pred.bel_F


def cell_l1(eps_O, eps_F):
    return np.abs(eps_O) + np.abs(eps_F)


def cell_l2(eps_O, eps_F):
    return np.square(eps_O) + np.square(eps_F)


def asymmetric_l1(eps_O, eps_F, k: float, sign: float = 1.0):
    """``|eps_O| + |eps_F| + sign * k * eps_F``.

    ``sign=+1`` (default) penalizes under-predicted free
    belief; ``sign=-1`` penalizes over-predicted free belief instead.
    """
    if not 0.0 <= k <= 1.0:
        raise MetricError("k must lie in [0, 1]")
    return np.abs(eps_O) + np.abs(eps_F) + sign * k * np.asarray(eps_F)


def certainty_weight(bel_O, bel_F, k: float):
    """``1 + k (C - 1)`` with target certainty ``C = bel(O) + bel(F)``."""
    if not 0.0 <= k <= 1.0:
        raise MetricError("k must lie in [0, 1]")
    return 1.0 + k * (np.asarray(bel_O) + np.asarray(bel_F) - 1.0)


def _check_aligned(pred: BeliefGrid, target: BeliefGrid):
    if pred.geometry != target.geometry or pred.bel_O.shape != target.bel_O.shape:
        raise MetricError("prediction and target grids differ in geometry")


CellLoss = Union[str, Callable]


def _loss_fn(cell_loss: CellLoss, asym_k: float, asym_sign: float):
    if callable(cell_loss):
        return cell_loss
    if cell_loss == "l1":
        return cell_l1
    if cell_loss == "l2":
        return cell_l2
    if cell_loss == "l1k":
        return lambda eo, ef: asymmetric_l1(eo, ef, asym_k, asym_sign)
    raise MetricError(f"unknown cell loss {cell_loss!r}")


def aggregate_loss(pred: BeliefGrid, target: BeliefGrid, cell_loss: CellLoss = "l1",
                   weight_k: Optional[float] = None, weights=None, asym_k: float = 0.0,
                   asym_sign: float = 1.0) -> float:
    """Weighted mean of per-cell losses.

    Weights are uniform unless ``weight_k`` (certainty weighting) or explicit
    ``weights`` are given.
    """
    eo, ef = residuals(pred, target)
    loss = np.asarray(_loss_fn(cell_loss, asym_k, asym_sign)(eo, ef), dtype=np.float64)
    if weights is not None:
        w = np.broadcast_to(np.asarray(weights, dtype=np.float64), loss.shape)
    elif weight_k is not None:
        w = certainty_weight(target.bel_O, target.bel_F, weight_k)
    else:
        return float(np.mean(loss))
    wsum = float(np.sum(w))
    if wsum <= 0.0:
        raise MetricError("weights sum to zero")
    return float(np.sum(w * loss) / wsum)


def weighted_mean(losses, weights) -> float:
    losses = np.asarray(losses, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    wsum = weights.sum()
    if wsum <= 0:
        raise MetricError("weights sum to zero")
    return float((weights * losses).sum() / wsum)


def false_occupied_cells(pred: BeliefGrid, target: BeliefGrid) -> np.ndarray:
    _check_aligned(pred, target)
    return np.maximum(0.0, pred.bel_O + target.bel_F - 1.0)


def false_free_cells(pred: BeliefGrid, target: BeliefGrid) -> np.ndarray:
    _check_aligned(pred, target)
    return np.maximum(0.0, target.bel_O + pred.bel_F - 1.0)


def false_occupied(pred: BeliefGrid, target: BeliefGrid) -> float:
    return float(np.mean(false_occupied_cells(pred, target)))


def false_free(pred: BeliefGrid, target: BeliefGrid) -> float:
    return float(np.mean(false_free_cells(pred, target)))


def relative_uncertainty(pred: BeliefGrid, target: BeliefGrid, eps: float = 1e-6) -> float:
    """Summed predicted uncertainty over summed target uncertainty."""
    _check_aligned(pred, target)
    u_target = float(np.sum(1.0 - target.bel_O - target.bel_F))
    if u_target < eps:
        raise MetricError("target uncertainty vanishes; relative uncertainty undefined")
    return float(np.sum(1.0 - pred.bel_O - pred.bel_F)) / u_target


@dataclass
class MetricReport:
    L1: float
    L2: float
    RelUnc: Optional[float]
    FalseO: float
    FalseF: float
    cells: int
    weight_sum: float
    L1k: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(pred: BeliefGrid, target: BeliefGrid, weight_k: Optional[float] = None,
             asym_k: Optional[float] = None, asym_sign: float = 1.0, eps: float = 1e-6) -> MetricReport:
    """All metrics for one prediction/target pair.

    ``RelUnc`` is ``None`` when the target carries no uncertainty.
    """
    _check_aligned(pred, target)
    w = certainty_weight(target.bel_O, target.bel_F, weight_k) if weight_k is not None else np.ones(target.bel_O.shape)
    try:
        rel = relative_uncertainty(pred, target, eps)
    except MetricError:
        rel = None
    return MetricReport(
        L1=aggregate_loss(pred, target, "l1", weights=w),
        L2=aggregate_loss(pred, target, "l2", weights=w),
        RelUnc=rel,
        FalseO=false_occupied(pred, target),
        FalseF=false_free(pred, target),
        cells=int(target.bel_O.size),
        weight_sum=float(w.sum()),
        L1k=aggregate_loss(pred, target, "l1k", weights=w, asym_k=asym_k, asym_sign=asym_sign)
        if asym_k is not None else None,
    )
