"""Global tissue stiffness from a press-release palpation trace."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateFitError(ValueError):
    pass


@dataclass(frozen=True)
class PalpationTrace:
    lambda_z: np.ndarray  # probe displacement along the force axis, mm
    force: np.ndarray  # contact force, N

    def __post_init__(self):
        lam = np.asarray(self.lambda_z, dtype=np.float64)
        force = np.asarray(self.force, dtype=np.float64)
        if lam.shape != force.shape or lam.ndim != 1:
            raise ValueError("lambda_z and force must be 1-D arrays of equal length")
        if lam.size < 3:
            raise ValueError("a palpation trace needs at least 3 samples")
        if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(force))):
            raise ValueError("palpation samples must be finite")
        if np.any(force < 0):
            raise ValueError("contact forces must be non-negative")
        object.__setattr__(self, "lambda_z", lam)
        object.__setattr__(self, "force", force)


@dataclass(frozen=True)
class StiffnessFit:
    c2_slope: float  # N/mm, the global stiffness
    c1_intercept: float  # N
    r_squared: float


@dataclass(frozen=True)
class StiffnessPopulation:
    mu_g: float
    delta_g: float
    n: int

    @classmethod
    def from_values(cls, values) -> "StiffnessPopulation":
        v = np.asarray(values, dtype=np.float64)
        if v.size == 0:
            raise ValueError("empty stiffness population")
        # population SD (divide by N)
        return cls(mu_g=float(v.mean()), delta_g=float(v.std()), n=int(v.size))

    def to_dict(self) -> dict:
        return {"mu_g": self.mu_g, "delta_g": self.delta_g, "n": self.n}


def fit_global_stiffness(trace: PalpationTrace) -> StiffnessFit:
    """Least-squares line ``force = c2 * lambda_z + c1``; ``c2`` is the stiffness."""
    lam, force = trace.lambda_z, trace.force
    dl = lam - lam.mean()
    sxx = float(dl @ dl)
    if sxx <= 0.0:
        raise DegenerateFitError("probe displacement has zero variance")
    c2 = float(dl @ (force - force.mean())) / sxx
    c1 = float(force.mean() - c2 * lam.mean())
    resid = force - (c2 * lam + c1)
    df = force - force.mean()
    sst = float(df @ df)
    r2 = 1.0 if sst == 0.0 else 1.0 - float(resid @ resid) / sst
    return StiffnessFit(c2_slope=c2, c1_intercept=c1, r_squared=float(np.clip(r2, 0.0, 1.0)))


def zscore(k_g: float, pop: StiffnessPopulation) -> float:
    if not pop.delta_g > 0:
        raise ValueError("population standard deviation must be positive")
    return (k_g - pop.mu_g) / pop.delta_g
