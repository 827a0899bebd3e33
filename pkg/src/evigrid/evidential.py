"""Evidence algebra on the frame {O, F}.

Masses are triples ``(m_O, m_F, m_Theta)``; the empty set always carries zero
mass. Voxel evidence is kept as integer reflection/transmission counts and
turned into masses with a closed form, so the result does not depend on the
order observations arrive in.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class EvidenceMass(NamedTuple):
    m_O: float
    m_F: float
    m_Theta: float

    @classmethod
    def vacuous(cls) -> "EvidenceMass":
        return cls(0.0, 0.0, 1.0)

    @classmethod
    def from_of(cls, m_O: float, m_F: float) -> "EvidenceMass":
        return cls(m_O, m_F, 1.0 - m_O - m_F)

    def validate(self, tol: float = 1e-12) -> "EvidenceMass":
        if any(not (-tol <= v <= 1.0 + tol) for v in self):
            raise ValueError(f"mass component outside [0, 1]: {self}")
        if abs(sum(self) - 1.0) > tol:
            raise ValueError(f"masses do not sum to one: {self}")
        return self


@dataclass(frozen=True)
class SensorEvidenceConfig:
    """Elementary masses of one reflection (R) and one transmission (T)."""

    e_R_O: float = 0.4
    e_R_Theta: float = 0.6
    e_T_F: float = 0.1
    e_T_Theta: float = 0.9

    def __post_init__(self):
        for name in ("e_R_O", "e_R_Theta", "e_T_F", "e_T_Theta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if abs(self.e_R_O + self.e_R_Theta - 1.0) > 1e-12 or abs(self.e_T_F + self.e_T_Theta - 1.0) > 1e-12:
            raise ValueError("elementary reflection and transmission masses must each sum to one")

    @property
    def reflection(self) -> EvidenceMass:
        return EvidenceMass(self.e_R_O, 0.0, self.e_R_Theta)

    @property
    def transmission(self) -> EvidenceMass:
        return EvidenceMass(0.0, self.e_T_F, self.e_T_Theta)


DEFAULT_EVIDENCE = SensorEvidenceConfig()


def combine_counts(m, n, cfg: SensorEvidenceConfig = DEFAULT_EVIDENCE):
    """Voxel masses from ``m`` reflections and ``n`` transmissions.

    Works element-wise on arrays; scalar input gives an :class:`EvidenceMass`.
    """
    if np.any(np.asarray(m) < 0) or np.any(np.asarray(n) < 0):
        raise ValueError("counts must be non-negative")
    r_theta = np.power(cfg.e_R_Theta, np.asarray(m, dtype=np.float64))
    t_theta = np.power(cfg.e_T_Theta, np.asarray(n, dtype=np.float64))
    m_O = (1.0 - r_theta) * t_theta
    m_F = (1.0 - t_theta) * r_theta
    m_T = 1.0 - m_O - m_F
    if np.ndim(m_O) == 0:
        return EvidenceMass(float(m_O), float(m_F), float(m_T))
    return m_O, m_F, m_T


def yager_combine(a: EvidenceMass, b: EvidenceMass) -> EvidenceMass:
    """Conjunctive combination; the conflict ``a_O b_F + a_F b_O`` goes to Theta."""
    a_O, a_F, a_T = a
    b_O, b_F, b_T = b
    m_O = a_O * b_O + a_O * b_T + a_T * b_O
    m_F = a_F * b_F + a_F * b_T + a_T * b_F
    conflict = a_O * b_F + a_F * b_O
    return EvidenceMass(m_O, m_F, a_T * b_T + conflict)


def yager_combine_all(masses) -> EvidenceMass:
    """Left fold of :func:`yager_combine`. Not associative in general."""
    out = EvidenceMass.vacuous()
    for m in masses:
        out = yager_combine(out, m)
    return out


def project_pillar(voxels) -> tuple[float, float]:
    """Collapse a vertical stack of voxel masses into ``(bel_O, bel_F)``.

    Occupancy of any voxel occupies the pillar (or-chain); the pillar is free
    only as far as every voxel is free (and-chain).
    """
    voxels = list(voxels)
    if not voxels:
        raise ValueError("empty pillar")
    arr = np.asarray([(v[0], v[1]) for v in voxels], dtype=np.float64)
    bel_F = float(np.prod(arr[:, 1]))
    bel_O = float(1.0 - np.prod(1.0 - arr[:, 0]))
    return bel_O, bel_F
