"""Posterior covariance models ``Sigma_t(x_t)``.

A *model* (``CovarianceModel`` subclass) is evaluated at a noisy state and
returns a *covariance* object that can multiply, invert and materialize
itself. Covariances act on arrays shaped ``batch + shape``; isotropic and
diagonal parameters may carry the same leading batch axes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import CapabilityError, DimensionError, DomainError, ValidationError
from .schedule import EdmSchedule
from .transforms import IdentityBasis

__all__ = [
    "EPS_VAR",
    "STABILITY_RATIO",
    "r_pigdm",
    "r_diffpir",
    "convert_reverse_variance",
    "IsotropicCovariance",
    "DiagonalCovariance",
    "TransformDiagonalCovariance",
    "DenseCovariance",
    "CovarianceModel",
    "Delta",
    "IsoPigdm",
    "IsoDiffPIR",
    "IsoAnalytic",
    "DiagSpatial",
    "DiagTransform",
    "ConvertedReverse",
    "TmpdDiag",
    "ExactPosterior",
    "VarianceTable",
    "TransformVarianceTable",
    "estimate_analytic_variance",
    "fit_transform_variance",
    "draw_signals",
    "diagonal_gaussian_nll",
]

EPS_VAR = 1e-6
STABILITY_RATIO = 1e-3


def r_pigdm(sigma):
    """Heuristic isotropic variance ``sigma^2 / (1 + sigma^2)``."""
    if np.any(np.asarray(sigma) < 0):
        raise DomainError("sigma must be non-negative")
    s2 = np.square(sigma)
    return s2 / (1.0 + s2)


def r_diffpir(sigma, lam):
    """Isotropic variance ``sigma^2 / lambda``."""
    if not lam > 0:
        raise DomainError(f"lambda must be positive, got {lam}")
    return np.square(sigma) / lam


def convert_reverse_variance(v2, t, sched):
    """Turn DDPM reverse variances into posterior variances.

    Returns ``(r2, unstable)``: ``r2 = (v2 - beta_tilde_t) / c_t^2`` floored at
    :data:`EPS_VAR`, and a boolean mask marking entries where ``v2`` sits so
    close to the lower bound that the conversion is unreliable.
    """
    t = sched._check(t)
    bt = sched.beta_tilde(t)
    c = sched.posterior_coef(t)
    excess = np.asarray(v2, dtype=np.float64) - bt
    unstable = excess < STABILITY_RATIO * (sched.beta(t) - bt)
    return np.maximum(excess / (c * c), EPS_VAR), unstable


def _lead(arr, ndim):
    """Append singleton axes so ``arr`` broadcasts against ``ndim`` trailing axes."""
    arr = np.asarray(arr, dtype=np.float64)
    return arr.reshape(arr.shape + (1,) * ndim)


class _Covariance:
    shape: tuple

    @property
    def size(self):
        return int(np.prod(self.shape))

    def is_zero(self):
        return False

    def dense(self):
        """``(d, d)`` matrix for an unbatched covariance."""
        eye = np.eye(self.size).reshape((self.size,) + self.shape)
        return self.matvec(eye).reshape(self.size, self.size).T

    def item(self, index):
        """Covariance of one element of the flattened batch."""
        return self


class IsotropicCovariance(_Covariance):
    """``r2 I``; ``r2`` is a scalar or one value per batch element."""

    def __init__(self, r2, shape):
        self.shape = tuple(shape)
        self.r2 = np.asarray(r2, dtype=np.float64)
        if np.any(self.r2 < 0):
            raise ValidationError("isotropic variance must be non-negative")

    def is_zero(self):
        return bool(np.all(self.r2 == 0))

    def matvec(self, v):
        return _lead(self.r2, len(self.shape)) * v

    def solve(self, v):
        return v / _lead(self.r2, len(self.shape))

    def logdet(self):
        return self.size * np.log(self.r2)

    def item(self, index):
        return IsotropicCovariance(self.r2.reshape(-1)[index] if self.r2.ndim else self.r2, self.shape)


class DiagonalCovariance(_Covariance):
    """``diag(r2)`` in pixel coordinates."""

    def __init__(self, r2, shape):
        self.shape = tuple(shape)
        self.r2 = np.asarray(r2, dtype=np.float64)
        if self.r2.shape[self.r2.ndim - len(self.shape):] != self.shape:
            raise DimensionError(f"variance shape {self.r2.shape} does not end with {self.shape}")
        if np.any(self.r2 < 0):
            raise ValidationError("variances must be non-negative")

    def is_zero(self):
        return bool(np.all(self.r2 == 0))

    def matvec(self, v):
        return self.r2 * v

    def solve(self, v):
        return v / self.r2

    def logdet(self):
        axes = tuple(range(self.r2.ndim - len(self.shape), self.r2.ndim))
        return np.sum(np.log(self.r2), axis=axes)

    def item(self, index):
        if self.r2.ndim == len(self.shape):
            return self
        return DiagonalCovariance(self.r2.reshape((-1,) + self.shape)[index], self.shape)


class TransformDiagonalCovariance(DiagonalCovariance):
    """``Psi diag(r2) Psi^T`` for an orthonormal basis ``Psi``."""

    def __init__(self, basis, r2, shape):
        super().__init__(r2, shape)
        self.basis = basis

    def matvec(self, v):
        return self.basis.inverse(self.r2 * self.basis.forward(v))

    def solve(self, v):
        return self.basis.inverse(self.basis.forward(v) / self.r2)

    def item(self, index):
        if self.r2.ndim == len(self.shape):
            return self
        return TransformDiagonalCovariance(self.basis, self.r2.reshape((-1,) + self.shape)[index], self.shape)


class DenseCovariance(_Covariance):
    """Explicit matrix over the flattened signal; ``matrix`` may be batched."""

    def __init__(self, matrix, shape):
        self.shape = tuple(shape)
        self.matrix = np.asarray(matrix, dtype=np.float64)
        if self.matrix.shape[-2:] != (self.size, self.size):
            raise DimensionError(f"matrix shape {self.matrix.shape} does not fit d={self.size}")

    def is_zero(self):
        return bool(np.all(self.matrix == 0))

    def _flat(self, v):
        return v.reshape(v.shape[: v.ndim - len(self.shape)] + (self.size,))

    def matvec(self, v):
        out = np.einsum("...ij,...j->...i", self.matrix, self._flat(v))
        return out.reshape(out.shape[:-1] + self.shape)

    def solve(self, v):
        out = np.linalg.solve(self.matrix, self._flat(v)[..., None])[..., 0]
        return out.reshape(out.shape[:-1] + self.shape)

    def logdet(self):
        return np.linalg.slogdet(self.matrix)[1]

    def dense(self):
        if self.matrix.ndim != 2:
            raise DimensionError("dense() needs an unbatched covariance; use item()")
        return self.matrix.copy()

    def item(self, index):
        if self.matrix.ndim == 2:
            return self
        return DenseCovariance(self.matrix.reshape((-1, self.size, self.size))[index], self.shape)


# ---------------------------------------------------------------- tables


@dataclass(frozen=True, eq=False)
class VarianceTable:
    """Scalar variances on a grid of noise levels, looked up by nearest entry.

    ``times`` holds the EDM time of each entry, which equals its noise level.
    """

    times: np.ndarray
    r2: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        r2 = np.asarray(self.r2, dtype=np.float64).reshape(-1)
        if times.size == 0 or times.shape != r2.shape:
            raise ValidationError("variance table needs matching non-empty columns")
        if np.any(r2 < 0):
            raise ValidationError("variance table entries must be non-negative")
        order = np.argsort(times)
        object.__setattr__(self, "times", times[order])
        object.__setattr__(self, "r2", r2[order])

    def index(self, t):
        i = int(np.searchsorted(self.times, t))
        if i == 0:
            return 0
        if i == self.times.size:
            return i - 1
        return i if self.times[i] - t < t - self.times[i - 1] else i - 1

    def lookup(self, t):
        return float(self.r2[self.index(t)])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "r2"])
            for t, r in zip(self.times, self.r2):
                w.writerow([repr(float(t)), repr(float(r))])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows or set(rows[0]) != {"t", "r2"}:
            raise ValidationError(f"{path}: expected CSV columns t,r2")
        return cls([float(r["t"]) for r in rows], [float(r["r2"]) for r in rows])


@dataclass(frozen=True, eq=False)
class TransformVarianceTable:
    """Per-coefficient variances ``(n_times, *shape)`` with nearest lookup."""

    times: np.ndarray
    r2: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        r2 = np.asarray(self.r2, dtype=np.float64)
        if r2.shape[0] != times.size:
            raise ValidationError("one variance array per grid time is required")
        order = np.argsort(times)
        object.__setattr__(self, "times", times[order])
        object.__setattr__(self, "r2", r2[order])

    index = VarianceTable.index

    def lookup(self, t):
        return self.r2[self.index(t)]


# ---------------------------------------------------------------- models


class CovarianceModel:
    """Base class; ``evaluate`` returns a covariance at one noise level."""

    name = "base"
    default_switch_sigma = np.inf
    transform_domain = False

    def evaluate(self, x_t, sigma, denoiser=None, scale=1.0):
        raise NotImplementedError

    def _batch(self, x_t, shape):
        x_t = np.asarray(x_t)
        return x_t.shape[: x_t.ndim - len(shape)]


def _shape_of(x_t, denoiser):
    if denoiser is not None:
        return denoiser.shape
    return np.shape(x_t)


class Delta(CovarianceModel):
    """Zero covariance (point-mass posterior)."""

    name = "dps"

    def evaluate(self, x_t, sigma, denoiser=None, scale=1.0):
        return IsotropicCovariance(0.0, _shape_of(x_t, denoiser))


class IsoPigdm(CovarianceModel):
    name = "pigdm"

    def evaluate(self, x_t, sigma, denoiser=None, scale=1.0):
        return IsotropicCovariance(r_pigdm(sigma), _shape_of(x_t, denoiser))


class IsoDiffPIR(CovarianceModel):
    name = "diffpir"

    def __init__(self, lam):
        if not lam > 0:
            raise DomainError(f"lambda must be positive, got {lam}")
        self.lam = float(lam)

    def evaluate(self, x_t, sigma, denoiser=None, scale=1.0):
        return IsotropicCovariance(r_diffpir(sigma, self.lam), _shape_of(x_t, denoiser))


class IsoAnalytic(CovarianceModel):
    """Scalar variance read from a pre-computed :class:`VarianceTable`."""

    name = "analytic"
    default_switch_sigma = 0.2

    def __init__(self, table):
        self.table = table

    def evaluate(self, x_t, sigma, denoiser=None, scale=1.0):
        return IsotropicCovariance(max(self.table.lookup(sigma), EPS_VAR), _shape_of(x_t, denoiser))


class DiagSpatial(CovarianceModel):
    """Per-pixel variances: fixed array, table lookup, or the denoiser's own output."""

    name = "diag"
    default_switch_sigma = 0.2

    def __init__(self, r2=None, table=None):
        if r2 is not None and table is not None:
            raise ValidationError("give either r2 or table, not both")
        self.r2 = None if r2 is None else np.asarray(r2, dtype=np.float64)
        self.table = table

    def _variances(self, x_t, sigma, denoiser, scale):
        if self.r2 is not None:
            return self.r2
        if self.table is not None:
            return self.table.lookup(sigma)
        if denoiser is None:
            raise CapabilityError("a denoiser with posterior variances is required")
        return denoiser.posterior_variance(x_t, sigma, scale)

    def evaluate(self, x_t, sigma, denoiser=None, scale=1.0):
        shape = _shape_of(x_t, denoiser)
        r2 = np.maximum(self._variances(x_t, sigma, denoiser, scale), EPS_VAR)
        return DiagonalCovariance(np.broadcast_to(r2, np.broadcast_shapes(r2.shape, shape)), shape)


class DiagTransform(DiagSpatial):
    """Variances diagonal in an orthonormal basis ``Psi``."""

    name = "dwt"
    default_switch_sigma = 1.0
    transform_domain = True

    def __init__(self, basis, r2=None, table=None):
        if r2 is None and table is None:
            raise ValidationError("transform-domain covariance needs r2 or a fitted table")
        super().__init__(r2=r2, table=table)
        self.basis = basis

    def evaluate(self, x_t, sigma, denoiser=None, scale=1.0):
        shape = _shape_of(x_t, denoiser)
        r2 = np.maximum(self._variances(x_t, sigma, denoiser, scale), EPS_VAR)
        r2 = np.broadcast_to(r2, np.broadcast_shapes(r2.shape, shape))
        if isinstance(self.basis, IdentityBasis):
            return DiagonalCovariance(r2, shape)
        return TransformDiagonalCovariance(self.basis, r2, shape)


class ConvertedReverse(CovarianceModel):
    """Per-pixel variances converted from a DDPM model's reverse variances.

    The noise level is mapped to the nearest step of ``sched``. Entries the
    conversion flags as unstable fall back to the isotropic heuristic.
    """

    name = "convert"
    default_switch_sigma = 0.2

    def __init__(self, sched):
        self.sched = sched

    def evaluate(self, x_t, sigma, denoiser=None, scale=1.0):
        if denoiser is None:
            raise CapabilityError("a denoiser with reverse variances is required")
        shape = denoiser.shape
        t = self.sched.time_of_sigma(min(sigma, self.sched.sigma_max))
        t = int(np.clip(np.rint(t), 1, self.sched.T))
        s_src = np.sqrt(self.sched.alpha_bar(t))
        v2 = denoiser.reverse_variance(np.asarray(x_t) * (s_src / scale), t, self.sched)
        r2, unstable = convert_reverse_variance(v2, t, self.sched)
        r2 = np.where(unstable, r_pigdm(sigma), r2)
        return DiagonalCovariance(r2, shape)


class TmpdDiag(CovarianceModel):
    """Row-sum approximation ``s sigma^2 J^T 1`` of the denoiser Jacobian."""

    name = "tmpd"
    default_switch_sigma = 0.2

    def evaluate(self, x_t, sigma, denoiser=None, scale=1.0):
        if denoiser is None or not denoiser.supports("vjp"):
            raise CapabilityError("TMPD covariance needs a denoiser with vector-Jacobian products")
        x_t = np.asarray(x_t, dtype=np.float64)
        g = denoiser.vjp(x_t, np.ones_like(x_t), sigma, scale)
        return DiagonalCovariance(np.maximum(scale * sigma**2 * g, EPS_VAR), denoiser.shape)


class ExactPosterior(CovarianceModel):
    """The denoiser's exact posterior covariance (oracle denoisers only)."""

    name = "exact"

    def evaluate(self, x_t, sigma, denoiser=None, scale=1.0):
        if denoiser is None:
            raise CapabilityError("a denoiser with posterior covariances is required")
        return DenseCovariance(denoiser.posterior_covariance(x_t, sigma, scale), denoiser.shape)


# ---------------------------------------------------------------- estimation


def _grid_points(sched, grid):
    for t in np.asarray(grid, dtype=np.float64).reshape(-1):
        yield float(t), sched.scale(t), sched.sigma(t)


def estimate_analytic_variance(denoiser, samples, sched=None, grid=None, seed=0, batch=4096):
    """Monte-Carlo estimate of ``E||x_0 - D(x_t)||^2 / d`` on a time grid.

    ``samples`` holds clean draws with shape ``(n,) + denoiser.shape``. The
    default grid is 1000 log-spaced EDM times in ``[0.002, 80]``.
    """
    sched = EdmSchedule() if sched is None else sched
    grid = np.geomspace(0.002, 80.0, 1000) if grid is None else grid
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 0 or samples.shape[0] == 0:
        raise ValidationError("at least one sample is required")
    if samples.shape[1:] != denoiser.shape:
        raise DimensionError(f"samples of shape {samples.shape[1:]} do not match {denoiser.shape}")
    d = int(np.prod(denoiser.shape))
    rng = np.random.default_rng(seed)
    times, r2 = [], []
    for t, s, sigma in _grid_points(sched, grid):
        total = 0.0
        for start in range(0, samples.shape[0], batch):
            x0 = samples[start: start + batch]
            x_t = s * (x0 + sigma * rng.standard_normal(x0.shape))
            err = x0 - denoiser.mean(x_t, sigma, s)
            total += float(np.sum(err * err))
        times.append(t)
        r2.append(total / (samples.shape[0] * d))
    return VarianceTable(times, r2)


def fit_transform_variance(prior, basis, grid, n_samples=10_000, seed=0, sched=None, shape=None):
    """Fit per-coefficient variances ``E[(Psi^T (x_0 - D(x_t)))_i^2]`` on a grid.

    Clean draws come from ``prior`` (a :class:`~optcov.oracle.GmmPrior`) and
    the exact oracle denoiser plays the role of ``D``. This is the minimizer of
    the diagonal Gaussian negative log-likelihood for a fixed mean.
    """
    from .denoisers import GmmDenoiser

    sched = EdmSchedule() if sched is None else sched
    shape = tuple(basis.shape) if shape is None else tuple(shape)
    den = GmmDenoiser(prior, shape)
    rng = np.random.default_rng(seed)
    times, tables = [], []
    for t, s, sigma in _grid_points(sched, grid):
        x0 = draw_signals(prior, n_samples, shape, rng)
        x_t = s * (x0 + sigma * rng.standard_normal(x0.shape))
        theta = basis.forward(x0 - den.mean(x_t, sigma, s))
        times.append(t)
        tables.append(np.mean(theta**2, axis=0))
    return TransformVarianceTable(times, np.stack(tables))


def draw_signals(prior, n, shape, rng):
    """``n`` signals of ``shape``; a one-dimensional prior fills pixels independently."""
    shape = tuple(shape)
    size = int(np.prod(shape))
    if prior.d == size:
        return prior.sample(n, rng)[0].reshape((n,) + shape)
    if prior.d == 1:
        return prior.sample(n * size, rng)[0].reshape((n,) + shape)
    raise DimensionError(f"prior dimension {prior.d} does not fit signals of shape {shape}")


def diagonal_gaussian_nll(residuals, cov):
    """Mean negative log-likelihood of ``residuals`` under ``N(0, cov)``, without the constant."""
    residuals = np.asarray(residuals, dtype=np.float64)
    axes = tuple(range(residuals.ndim - len(cov.shape), residuals.ndim))
    quad = np.sum(residuals * cov.solve(residuals), axis=axes)
    return float(np.mean(0.5 * (quad + cov.logdet())))
