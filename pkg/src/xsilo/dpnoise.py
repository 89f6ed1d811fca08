"""Distributed Gaussian noise and privacy accounting.

Gaussian noise is infinitely divisible: if each of ``N`` parties adds
``N(0, s_i^2)`` the aggregate is ``N(0, sum s_i^2)``. A plan fixes the
per-party std so the aggregate meets a target ``sigma`` either assuming every
party is a TEE (``tee``) or tolerating ``T`` colluders (``collusion_robust``).
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass
from typing import Protocol

import numpy as np
from scipy.optimize import brentq
from scipy.stats import norm


class DegenerateCollusion(ValueError):
    pass


class UnachievableBudget(ValueError):
    pass


class NoiseMode(str, enum.Enum):
    TEE = "tee"
    COLLUSION_ROBUST = "collusion_robust"


@dataclass(frozen=True)
class NoisePlan:
    total_sigma: float
    N: int
    T: int
    per_party_sigma: float
    mode: NoiseMode

    @property
    def aggregate_variance(self) -> float:
        return self.N * self.per_party_sigma**2

    def residual_variance(self, removed: int) -> float:
        """Aggregate variance left after ``removed`` parties' shares are known to an attacker."""
        return (self.N - removed) * self.per_party_sigma**2

    def to_dict(self) -> dict:
        return {
            "sigma": self.total_sigma,
            "N": self.N,
            "T": self.T,
            "mode": self.mode.value,
            "sigma_i": self.per_party_sigma,
        }


def plan_noise(sigma: float, N: int, T: int = 0, mode: NoiseMode | str = NoiseMode.TEE) -> NoisePlan:
    mode = NoiseMode(mode)
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if N < 1:
        raise ValueError("N must be positive")
    if mode is NoiseMode.TEE:
        var_i = sigma**2 / N
    else:
        honest = N - T - 1
        if T < 0 or honest < 1:
            raise DegenerateCollusion(f"N - T - 1 = {honest}; need at least one other honest party")
        var_i = sigma**2 / honest
    return NoisePlan(sigma, N, T, math.sqrt(var_i), mode)


def sample_noise_share(plan: NoisePlan, dim: int, rng: np.random.Generator) -> np.ndarray:
    if plan.per_party_sigma == 0:
        return np.zeros(dim)
    return rng.normal(0.0, plan.per_party_sigma, size=dim)


@dataclass(frozen=True)
class MechanismParams:
    clip_norm: float
    noise_multiplier: float
    delta: float
    steps: int
    sampling_fraction: float = 1.0
    epsilon: float | None = None

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.noise_multiplier <= 0:
            raise ValueError("noise_multiplier must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if not 0 <= self.sampling_fraction <= 1:
            raise ValueError("sampling_fraction must lie in [0, 1]")

    @property
    def sigma(self) -> float:
        return self.noise_multiplier * self.clip_norm

    def to_dict(self) -> dict:
        return asdict(self)


class Accountant(Protocol):
    def epsilon(self, params: MechanismParams) -> float: ...


def gaussian_delta(epsilon: float, mu: float) -> float:
    """Tight delta of a Gaussian mechanism with sensitivity/std ratio ``mu``."""
    if mu == 0:
        return 0.0
    second = math.exp(epsilon + norm.logcdf(-epsilon / mu - mu / 2))
    return float(norm.cdf(-epsilon / mu + mu / 2) - second)


def gaussian_epsilon(mu: float, delta: float, eps_max: float = 1e4) -> float:
    """Smallest epsilon with ``gaussian_delta(epsilon, mu) <= delta``."""
    if mu == 0 or gaussian_delta(0.0, mu) <= delta:
        return 0.0
    if gaussian_delta(eps_max, mu) > delta:
        raise UnachievableBudget(f"delta={delta} not reachable below epsilon={eps_max} (mu={mu})")
    return brentq(lambda e: gaussian_delta(e, mu) - delta, 0.0, eps_max, xtol=1e-12, rtol=1e-12)


class ConservativeGaussianAccountant:
    """Composition of full-batch Gaussian mechanisms, ignoring subsampling.

    ``steps`` Gaussian mechanisms with noise multiplier ``z`` compose exactly
    into one with ratio ``mu = sqrt(steps) / z``. Treating every step as if it
    touched the whole dataset over-states epsilon for subsampled runs, which
    is the safe direction. Plug in an amplification-aware accountant through
    the :class:`Accountant` protocol for tighter numbers.
    """

    def epsilon(self, params: MechanismParams) -> float:
        if params.steps == 0 or params.sampling_fraction == 0:
            return 0.0
        mu = math.sqrt(params.steps) / params.noise_multiplier
        return gaussian_epsilon(mu, params.delta)

    def noise_multiplier_for(self, epsilon: float, delta: float, steps: int) -> float:
        if steps == 0:
            raise ValueError("no noise is needed for zero steps")
        mu = brentq(lambda m: gaussian_delta(epsilon, m) - delta, 1e-6, 1e3, xtol=1e-14)
        return math.sqrt(steps) / mu


DEFAULT_ACCOUNTANT = ConservativeGaussianAccountant()


def account_privacy(params: MechanismParams, accountant: Accountant | None = None) -> float:
    return (accountant or DEFAULT_ACCOUNTANT).epsilon(params)
