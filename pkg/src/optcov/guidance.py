"""Conditional posterior-mean approximations for ``y = A x_0 + n``.

Everything revolves around

    v = A^T (sigma_y^2 I + A Sigma A^T)^-1 (y - A D),

evaluated in closed form when ``Sigma`` is isotropic and ``A`` has a
circulant Gram matrix, and by conjugate gradients otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .covariance import CovarianceModel, IsoPigdm, IsotropicCovariance, r_pigdm
from .errors import CapabilityError, SingularityError, ValidationError
from .solvers import conjugate_gradient

__all__ = [
    "GuidanceConfig",
    "SolverStats",
    "GuidanceResult",
    "compute_v",
    "dense_v",
    "select_covariance",
    "type1_conditional_mean",
    "type2_conditional_mean",
    "ddnm_solution",
    "dps_step_size",
    "proximal_solution_dense",
    "conditional_mean",
]

MODES = ("type1", "type2", "ddnm")


@dataclass
class GuidanceConfig:
    mode: str = "type2"
    covariance: CovarianceModel = field(default_factory=IsoPigdm)
    dps_zeta: float | None = None
    adaptive_weight: bool = False
    switch_sigma: float | None = None
    fallback_covariance: CovarianceModel = field(default_factory=IsoPigdm)
    cg_tol: float = 1e-4
    cg_max_iter: int = 1000
    method: str = "auto"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"unknown guidance mode {self.mode!r}; expected one of {MODES}")
        if self.dps_zeta is not None:
            if self.mode != "type1":
                raise ValidationError("dps_zeta only applies to type1 guidance")
            if not self.dps_zeta > 0:
                raise ValidationError("dps_zeta must be positive")
        if self.switch_sigma is not None and not self.switch_sigma >= 0:
            raise ValidationError("switch_sigma must be non-negative")

    @property
    def effective_switch_sigma(self):
        if self.switch_sigma is not None:
            return self.switch_sigma
        return self.covariance.default_switch_sigma


@dataclass
class SolverStats:
    method: str
    iterations: int = 0
    residual: float = 0.0


@dataclass
class GuidanceResult:
    x0: np.ndarray
    v: np.ndarray | None
    stats: SolverStats
    covariance: str = ""


def _sum_core(a, ndim):
    return np.sum(a, axis=tuple(range(a.ndim - ndim, a.ndim)))


def dense_v(meas, D, cov):
    """Reference evaluation of ``v`` with explicit matrices, one batch element at a time."""
    op = meas.operator
    A = op.dense()
    res = meas.residual(D)
    batch = res.shape[: res.ndim - len(op.out_shape)]
    flat = res.reshape((-1, op.out_dim))
    out = np.empty((flat.shape[0], op.in_dim))
    for i, r in enumerate(flat):
        S = cov.item(i).dense()
        M = meas.sigma**2 * np.eye(op.out_dim) + A @ S @ A.T
        out[i] = A.T @ np.linalg.solve(M, r)
    return out.reshape(batch + op.in_shape)


def compute_v(meas, D, cov, method="auto", tol=1e-4, max_iter=1000):
    """Return ``(v, SolverStats)`` for the evaluated covariance ``cov``.

    ``method`` is ``"auto"`` (closed form when available, else CG),
    ``"closed"``, ``"cg"`` or ``"dense"``.
    """
    op = meas.operator
    sigma2 = meas.sigma**2
    if sigma2 == 0 and cov.is_zero():
        raise SingularityError("noiseless measurements with zero covariance make v undefined")
    if method == "dense":
        return dense_v(meas, D, cov), SolverStats("dense")
    res = meas.residual(D)
    if method in ("auto", "closed") and isinstance(cov, IsotropicCovariance):
        if sigma2 == 0 and not np.all(cov.r2 > 0):
            raise SingularityError("zero variance with noiseless measurements")
        try:
            u = op.isotropic_solve(res, sigma2, cov.r2)
        except CapabilityError:
            if method == "closed":
                raise
        else:
            return op.adjoint(u), SolverStats("closed-form")
    elif method == "closed":
        raise CapabilityError("closed-form v requires an isotropic covariance")
    if method not in ("auto", "cg"):
        raise ValidationError(f"unknown method {method!r}")

    def matvec(u):
        return sigma2 * u + op.apply(cov.matvec(op.adjoint(u)))

    result = conjugate_gradient(matvec, res, len(op.out_shape), tol=tol, max_iter=max_iter)
    return op.adjoint(result.x), SolverStats("cg", result.iterations, result.residual)


def select_covariance(cfg, sigma):
    """Primary covariance below the switching level, fallback above it."""
    if sigma < cfg.effective_switch_sigma:
        return cfg.covariance
    return cfg.fallback_covariance


def dps_step_size(zeta, residual, core_ndim):
    """``zeta / ||y - A D||`` per batch element."""
    norm = np.sqrt(_sum_core(np.square(residual), core_ndim))
    if np.any(norm == 0):
        raise SingularityError("DPS step size is undefined for a zero residual")
    return zeta / norm


def _expand(a, ndim):
    a = np.asarray(a)
    return a.reshape(a.shape + (1,) * ndim)


def type1_conditional_mean(x_t, denoiser, meas, cfg, scale, sigma, mean=None):
    """Drift the denoiser output by the approximate likelihood score.

    ``x0 = D + s sigma^2 w J^T v``, with ``J`` the denoiser Jacobian. With
    ``cfg.dps_zeta`` set, the score is replaced by ``-zeta_t grad ||y - A D||^2``.
    """
    if not denoiser.supports("vjp"):
        raise CapabilityError("type1 guidance needs a denoiser with vector-Jacobian products")
    D = denoiser.mean(x_t, sigma, scale) if mean is None else mean
    op = meas.operator
    nd = len(op.in_shape)
    if cfg.dps_zeta is not None:
        res = meas.residual(D)
        zeta_t = dps_step_size(cfg.dps_zeta, res, len(op.out_shape))
        # -zeta_t grad ||y - A D||^2 = 2 zeta_t J^T A^T (y - A D)
        v = 2.0 * _expand(zeta_t, nd) * op.adjoint(res)
        stats, name, weight = SolverStats("dps"), "dps", 1.0
    else:
        model = select_covariance(cfg, sigma)
        cov = model.evaluate(x_t, sigma, denoiser, scale)
        v, stats = compute_v(meas, D, cov, cfg.method, cfg.cg_tol, cfg.cg_max_iter)
        name = model.name
        weight = r_pigdm(sigma) if cfg.adaptive_weight else 1.0
    g = denoiser.vjp(x_t, v, sigma, scale)
    return GuidanceResult(D + scale * sigma**2 * weight * g, v, stats, name)


def type2_conditional_mean(x_t, denoiser, meas, cfg, scale, sigma, mean=None):
    """Covariance-weighted proximal solution ``D + Sigma v``."""
    D = denoiser.mean(x_t, sigma, scale) if mean is None else mean
    model = select_covariance(cfg, sigma)
    cov = model.evaluate(x_t, sigma, denoiser, scale)
    v, stats = compute_v(meas, D, cov, cfg.method, cfg.cg_tol, cfg.cg_max_iter)
    return GuidanceResult(D + cov.matvec(v), v, stats, model.name)


def ddnm_solution(D, meas):
    """Range/null-space combination ``A^+ y + (I - A^+ A) D``."""
    op = meas.operator
    return op.pseudo_inverse(meas.y) + (D - op.pseudo_inverse(op.apply(D)))


def proximal_solution_dense(D, y, A, Sigma, noise_sigma):
    """``(Sigma^-1 + A^T A / s^2)^-1 (Sigma^-1 D + A^T y / s^2)`` by dense solves."""
    A = np.asarray(A, dtype=np.float64)
    Sinv = np.linalg.inv(Sigma)
    s2 = noise_sigma**2
    return np.linalg.solve(Sinv + A.T @ A / s2, Sinv @ D + A.T @ y / s2)


def conditional_mean(x_t, denoiser, meas, cfg, scale, sigma):
    """Dispatch on ``cfg.mode``; returns a :class:`GuidanceResult`."""
    if cfg.mode == "type1":
        return type1_conditional_mean(x_t, denoiser, meas, cfg, scale, sigma)
    if cfg.mode == "type2":
        return type2_conditional_mean(x_t, denoiser, meas, cfg, scale, sigma)
    D = denoiser.mean(x_t, sigma, scale)
    return GuidanceResult(ddnm_solution(D, meas), None, SolverStats("pseudo-inverse"), "ddnm")
