"""DP random projection of clipped gradient sums.

Parties share a seed, regenerate the same ``d x k`` Gaussian matrix ``P``
(entries ``N(0, 1/k)``) and securely sum ``P^T z`` instead of ``z``. For a
difference vector ``a`` with ``||a|| <= C``, ``||P^T a||^2`` is distributed as
``(||a||^2 / k) chi^2_k``, so ``C_tilde`` chosen as the ``1 - delta'`` quantile
of ``Gamma(k/2, 2 C^2 / k)`` bounds the projected sensitivity except with
probability ``delta'``. The master maps the noisy sum back with ``P``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import gammaincc, gammainccinv

from .prg import keyed_gaussian

PROJECTION_DOMAIN = b"xsilo-project"


class DimensionError(ValueError):
    pass


class ClipViolation(ValueError):
    pass


def _tail(k: int, clip_norm: float, proj_sensitivity: float) -> float:
    """``P[Gamma(k/2, 2 C^2 / k) > C_tilde^2]``; the upper tail keeps precision for tiny delta'."""
    return float(gammaincc(k / 2, proj_sensitivity**2 * k / (2 * clip_norm**2)))


def solve_sensitivity(k: int, clip_norm: float, delta_prime: float) -> float:
    """Smallest ``C_tilde`` with ``P[Gamma(k/2, 2 C^2 / k) <= C_tilde^2] >= 1 - delta'``."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if clip_norm < 0:
        raise ValueError("clip norm must be non-negative")
    if not 0 < delta_prime < 1:
        raise ValueError("delta' must lie in (0, 1)")
    if clip_norm == 0:
        return 0.0
    c = math.sqrt(gammainccinv(k / 2, delta_prime) * 2 * clip_norm**2 / k)
    # the inverse is accurate to a few ulps; step up until the condition holds
    while _tail(k, clip_norm, c) > delta_prime:
        c = float(np.nextafter(c, np.inf))
    return c


def sensitivity_holds(k: int, clip_norm: float, proj_sensitivity: float, delta_prime: float) -> bool:
    if clip_norm == 0:
        return True
    return _tail(k, clip_norm, proj_sensitivity) <= delta_prime


@dataclass(frozen=True)
class ProjectionSpec:
    d: int
    k: int
    seed: bytes
    clip_norm: float
    delta_prime: float = 1e-6
    proj_sensitivity: float | None = None

    def __post_init__(self):
        if not 1 <= self.k <= self.d:
            raise DimensionError(f"need 1 <= k <= d, got k={self.k}, d={self.d}")
        if self.clip_norm <= 0:
            raise ValueError("clip norm must be positive")
        if not 0 < self.delta_prime < 1:
            raise ValueError("delta' must lie in (0, 1)")
        if self.proj_sensitivity is None:
            object.__setattr__(self, "proj_sensitivity", solve_sensitivity(self.k, self.clip_norm, self.delta_prime))
        elif not sensitivity_holds(self.k, self.clip_norm, self.proj_sensitivity, self.delta_prime):
            raise ValueError("stored projection sensitivity violates the Gamma-quantile condition")

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "k": self.k,
            "C": self.clip_norm,
            "C_tilde": self.proj_sensitivity,
            "delta_prime": self.delta_prime,
        }


@lru_cache(maxsize=4)
def _matrix(seed: bytes, round: int, d: int, k: int) -> np.ndarray:
    P = keyed_gaussian(seed, round, (d, k), PROJECTION_DOMAIN)
    P *= 1.0 / math.sqrt(k)
    P.setflags(write=False)
    return P


def generate_projection(spec: ProjectionSpec, round: int = 0) -> np.ndarray:
    """Deterministic ``d x k`` matrix for ``(spec.seed, round)``; read-only."""
    return _matrix(spec.seed, round, spec.d, spec.k)


def project_and_sum(gradients, P: np.ndarray, clip_norm: float | None = None, tol: float = 1e-9) -> np.ndarray:
    """``sum_j P^T z_j`` over the rows of ``gradients``."""
    G = np.atleast_2d(np.asarray(gradients, dtype=np.float64))
    if G.shape[0] == 0:
        return np.zeros(P.shape[1])
    if G.shape[1] != P.shape[0]:
        raise DimensionError(f"gradient dim {G.shape[1]} != projection rows {P.shape[0]}")
    if clip_norm is not None:
        norms = np.linalg.norm(G, axis=1)
        if np.any(norms > clip_norm * (1 + tol)):
            raise ClipViolation(f"gradient norm {norms.max():.6g} exceeds clip bound {clip_norm}")
    return P.T @ G.sum(axis=0)


def reconstruct(noisy_projection: np.ndarray, P: np.ndarray) -> np.ndarray:
    v = np.asarray(noisy_projection, dtype=np.float64)
    if v.shape != (P.shape[1],):
        raise DimensionError(f"projection has shape {v.shape}, expected ({P.shape[1]},)")
    return P @ v
