"""Denoisers supplying ``D(x_t) ~ E[x_0 | x_t]`` and optional extras.

Every denoiser acts on arrays whose trailing axes equal ``shape``. Calls take
the noise level ``sigma`` and kernel scale ``scale`` of the current state.
"""

from __future__ import annotations

import numpy as np

from . import oracle
from .errors import CapabilityError, DimensionError

__all__ = ["Denoiser", "GmmDenoiser", "FunctionDenoiser", "FiniteDifferenceVJP", "CAPABILITIES"]

CAPABILITIES = ("mean", "vjp", "posterior_variance", "posterior_covariance", "reverse_variance")


class Denoiser:
    """Base class. Subclasses override ``mean`` and whichever extras they support."""

    capabilities = frozenset({"mean"})

    def __init__(self, shape):
        self.shape = tuple(shape)

    def supports(self, capability):
        return capability in self.capabilities

    def _missing(self, what):
        raise CapabilityError(f"{type(self).__name__} does not provide {what}")

    def mean(self, x, sigma, scale=1.0):
        raise NotImplementedError

    def vjp(self, x, cotangent, sigma, scale=1.0):
        self._missing("vector-Jacobian products")

    def posterior_variance(self, x, sigma, scale=1.0):
        self._missing("posterior variances")

    def posterior_covariance(self, x, sigma, scale=1.0):
        self._missing("posterior covariances")

    def reverse_variance(self, x, t, sched):
        self._missing("reverse variances")


class GmmDenoiser(Denoiser):
    """Exact denoiser of a :class:`~optcov.oracle.GmmPrior`.

    If the prior is one-dimensional and ``shape`` has several entries, every
    entry is an independent draw from the prior.
    """

    capabilities = frozenset(CAPABILITIES)

    def __init__(self, prior, shape=None):
        shape = (prior.d,) if shape is None else tuple(shape)
        super().__init__(shape)
        self.prior = prior
        size = int(np.prod(shape))
        if prior.d == size:
            self.iid = False
        elif prior.d == 1:
            self.iid = True
        else:
            raise DimensionError(f"prior dimension {prior.d} does not fit signal shape {shape}")

    def _flat(self, x):
        x = np.asarray(x, dtype=np.float64)
        n = len(self.shape)
        if x.shape[x.ndim - n:] != self.shape:
            raise DimensionError(f"state has shape {x.shape}, expected trailing {self.shape}")
        batch = x.shape[: x.ndim - n]
        return x.reshape(batch + ((-1, 1) if self.iid else (-1,))), batch

    def _unflat(self, v, batch):
        return v.reshape(batch + self.shape)

    def mean(self, x, sigma, scale=1.0):
        z, batch = self._flat(x)
        return self._unflat(oracle.gmm_posterior_mean(self.prior, z, scale, sigma), batch)

    def vjp(self, x, cotangent, sigma, scale=1.0):
        z, batch = self._flat(x)
        c, _ = self._flat(np.broadcast_to(cotangent, np.broadcast_shapes(np.shape(cotangent), np.shape(x))))
        return self._unflat(oracle.gmm_vjp(self.prior, z, c, scale, sigma), batch)

    def posterior_variance(self, x, sigma, scale=1.0):
        z, batch = self._flat(x)
        return self._unflat(oracle.gmm_posterior_variance(self.prior, z, scale, sigma), batch)

    def posterior_covariance(self, x, sigma, scale=1.0):
        """Dense ``(..., d, d)`` covariance over the flattened signal."""
        if self.iid:
            var = self.posterior_variance(x, sigma, scale)
            flat = var.reshape(var.shape[: var.ndim - len(self.shape)] + (-1,))
            if flat.shape[-1] > oracle.DENSE_ORACLE_LIMIT:
                raise CapabilityError("dense posterior covariance refused for large signals")
            return flat[..., :, None] * np.eye(flat.shape[-1])
        z, _ = self._flat(x)
        return oracle.gmm_posterior_covariance(self.prior, z, scale, sigma)

    def reverse_variance(self, x, t, sched):
        z, batch = self._flat(x)
        return self._unflat(oracle.gmm_reverse_variance(self.prior, z, t, sched), batch)


class FunctionDenoiser(Denoiser):
    """Wrap a plain callable ``fn(x, sigma, scale) -> mean``."""

    def __init__(self, fn, shape):
        super().__init__(shape)
        self.fn = fn

    def mean(self, x, sigma, scale=1.0):
        return np.asarray(self.fn(x, sigma, scale), dtype=np.float64)


class FiniteDifferenceVJP(Denoiser):
    """Add central finite-difference VJPs to a mean-only denoiser.

    The step is ``1e-4 * (1 + max|x|)`` per sample. Each call costs two mean
    evaluations per signal entry, so this is for small signals only.
    """

    def __init__(self, base, rel_step=1e-4):
        super().__init__(base.shape)
        self.base = base
        self.rel_step = rel_step
        self.capabilities = frozenset(base.capabilities | {"vjp"})

    def __getattr__(self, name):
        return getattr(self.base, name)

    def mean(self, x, sigma, scale=1.0):
        return self.base.mean(x, sigma, scale)

    def vjp(self, x, cotangent, sigma, scale=1.0):
        x = np.asarray(x, dtype=np.float64)
        n = len(self.shape)
        batch = x.shape[: x.ndim - n]
        size = int(np.prod(self.shape))
        flat = x.reshape(batch + (size,))
        c = np.broadcast_to(cotangent, x.shape).reshape(batch + (size,))
        h = self.rel_step * (1.0 + np.max(np.abs(flat), axis=-1, keepdims=True))
        eye = np.eye(size)
        plus = flat[..., None, :] + h[..., None] * eye
        minus = flat[..., None, :] - h[..., None] * eye
        fp = self.base.mean(plus.reshape(batch + (size,) + self.shape), sigma, scale)
        fm = self.base.mean(minus.reshape(batch + (size,) + self.shape), sigma, scale)
        jac_rows = (fp - fm).reshape(batch + (size, size)) / (2.0 * h[..., None])
        # jac_rows[..., j, :] = dD/dx_j
        return np.einsum("...ji,...i->...j", jac_rows, c).reshape(x.shape)
