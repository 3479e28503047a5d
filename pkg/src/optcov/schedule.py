"""Noise schedules and perturbation-kernel conversions.

A perturbation kernel is ``p_t(x_t | x_0) = N(s_t x_0, s_t^2 sigma_t^2 I)``.
Two parameterizations are supported: the EDM kernel (``s_t = 1``,
``sigma_t = t``) and the variance-preserving kernel of a discrete DDPM
schedule (``s_t = sqrt(abar_t)``, ``sigma_t = sqrt(bbar_t / abar_t)``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .errors import DomainError, RangeError, SingularityError, ValidationError

__all__ = [
    "NoiseSchedule",
    "EdmSchedule",
    "DdpmSchedule",
    "edm_sigma",
    "ddpm_from_betas",
    "linear_betas",
    "convert_between_kernels",
    "tweedie_score",
]


class NoiseSchedule(Protocol):
    def sigma(self, t: float) -> float: ...

    def scale(self, t: float) -> float: ...

    def time_of_sigma(self, sigma: float) -> float: ...


def edm_sigma(t: float) -> tuple[float, float]:
    """Return ``(s_t, sigma_t) = (1, t)``."""
    if t < 0:
        raise DomainError(f"time must be non-negative, got {t}")
    return 1.0, float(t)


@dataclass(frozen=True)
class EdmSchedule:
    t_max: float = 80.0

    def __post_init__(self):
        if not self.t_max > 0:
            raise ValidationError("t_max must be positive")

    def sigma(self, t):
        return edm_sigma(t)[1]

    def scale(self, t):
        return edm_sigma(t)[0]

    def time_of_sigma(self, sigma):
        if sigma < 0 or sigma > self.t_max:
            raise RangeError(f"sigma={sigma} outside [0, {self.t_max}]")
        return float(sigma)


@dataclass(frozen=True, eq=False)
class DdpmSchedule:
    """Discrete DDPM schedule with every derived quantity precomputed.

    Arrays are indexed by ``t - 1`` for ``t = 1..T``; use the accessor
    methods, which also handle the ``t = 0`` boundary (``abar_0 = 1``,
    ``bbar_0 = 0``).
    """

    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)
    beta_bars: np.ndarray = field(init=False)
    beta_tildes: np.ndarray = field(init=False)
    lambda2: np.ndarray = field(init=False)
    _sigmas: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        betas = np.array(self.betas, dtype=np.float64).reshape(-1)
        if betas.size == 0:
            raise ValidationError("schedule needs at least one beta")
        if not np.all((betas > 0) & (betas < 1)):
            raise ValidationError("all betas must lie in (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        beta_bars = 1.0 - alpha_bars
        prev_bbar = np.concatenate([[0.0], beta_bars[:-1]])
        beta_tildes = prev_bbar / beta_bars * betas
        if np.any(np.diff(alpha_bars) >= 0) or np.any(alpha_bars <= 0):
            raise ValidationError("cumulative alphas must be strictly decreasing and positive")
        sigmas = np.concatenate([[0.0], np.sqrt(beta_bars / alpha_bars)])
        for name, value in [
            ("betas", betas),
            ("alphas", alphas),
            ("alpha_bars", alpha_bars),
            ("beta_bars", beta_bars),
            ("beta_tildes", beta_tildes),
            ("lambda2", beta_tildes.copy()),
            ("_sigmas", sigmas),
        ]:
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def T(self) -> int:
        return self.betas.size

    def _check(self, t, lo=1):
        if int(t) != t or not lo <= t <= self.T:
            raise ValidationError(f"step index {t} outside [{lo}, {self.T}]")
        return int(t)

    def alpha_bar(self, t):
        t = self._check(t, lo=0)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def beta_bar(self, t):
        t = self._check(t, lo=0)
        return 0.0 if t == 0 else float(self.beta_bars[t - 1])

    def beta(self, t):
        return float(self.betas[self._check(t) - 1])

    def beta_tilde(self, t):
        return float(self.beta_tildes[self._check(t) - 1])

    def posterior_coef(self, t):
        """``c_t = sqrt(abar_{t-1}) beta_t / (1 - abar_t)``, the x_0 weight of the reverse mean."""
        t = self._check(t)
        return np.sqrt(self.alpha_bar(t - 1)) * self.beta(t) / self.beta_bar(t)

    # continuous-time view: sigma linear between grid points, s = 1/sqrt(1 + sigma^2)

    def sigma(self, t):
        if t < 0 or t > self.T:
            raise RangeError(f"time {t} outside [0, {self.T}]")
        return float(np.interp(t, np.arange(self.T + 1), self._sigmas))

    def scale(self, t):
        return 1.0 / np.sqrt(1.0 + self.sigma(t) ** 2)

    def time_of_sigma(self, sigma):
        if sigma < 0 or sigma > self._sigmas[-1]:
            raise RangeError(f"sigma={sigma} outside [0, {self._sigmas[-1]:.6g}]")
        return float(np.interp(sigma, self._sigmas, np.arange(self.T + 1)))

    @property
    def sigma_max(self):
        return float(self._sigmas[-1])


def ddpm_from_betas(betas) -> DdpmSchedule:
    return DdpmSchedule(np.asarray(betas, dtype=np.float64))


def linear_betas(T: int, beta_min: float = 1e-4, beta_max: float = 2e-2) -> DdpmSchedule:
    if T < 1:
        raise ValidationError("T must be positive")
    return DdpmSchedule(np.linspace(beta_min, beta_max, T))


def convert_between_kernels(t, target, source):
    """Map target-kernel time ``t`` onto the source kernel.

    Returns ``(t_prime, input_scale)`` with ``sigma_src(t_prime) = sigma_tgt(t)``;
    a source-kernel solution evaluated at ``input_scale * x`` then serves the
    target kernel at ``x``.
    """
    sigma = target.sigma(t)
    t_prime = source.time_of_sigma(sigma)
    return t_prime, source.scale(t_prime) / target.scale(t)


def tweedie_score(x_t, posterior_mean, s, sigma):
    """Score of the noisy marginal from a posterior mean: ``(s E[x0|x_t] - x_t) / (s sigma)^2``."""
    if sigma == 0:
        raise SingularityError("the score is undefined at sigma = 0")
    return (s * np.asarray(posterior_mean) - np.asarray(x_t)) / (s * s * sigma * sigma)
