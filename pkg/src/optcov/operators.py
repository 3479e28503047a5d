"""Linear degradation operators.

Signals are real arrays whose trailing axes carry the signal shape given at
construction; any leading axes are treated as a batch. Spatial layout:

* ``(n,)`` is a 1-D signal,
* ``(H, W)`` a single-channel image,
* ``(H, W, C)`` a multi-channel image; operators act on each channel.

FFTs are unnormalized forward and ``1/d``-scaled inverse (numpy default).
Boundary handling is circular everywhere.
"""

from __future__ import annotations

import numpy as np
import scipy.fft as sfft

from .errors import CapabilityError, DimensionError, ValidationError

__all__ = [
    "LinearOperator",
    "IdentityOp",
    "MaskOp",
    "CircularConvOp",
    "SuperResOp",
    "DenseOp",
    "MeasurementModel",
    "spatial_axes",
    "embed_kernel",
    "block_downsample_spectrum",
    "DEFAULT_SPECTRAL_THRESHOLD",
]

DEFAULT_SPECTRAL_THRESHOLD = 3e-2
DENSE_LIMIT = 64 * 64


def spatial_axes(shape):
    """Axes (negative indices) that FFTs run over for a given signal shape."""
    if len(shape) == 1:
        return (-1,)
    if len(shape) == 2:
        return (-2, -1)
    if len(shape) == 3:
        return (-3, -2)
    raise ValidationError(f"unsupported signal shape {shape}")


def _spatial_shape(shape):
    return tuple(shape[: min(len(shape), 2)]) if len(shape) > 1 else tuple(shape)


def embed_kernel(kernel, spatial_shape):
    """Zero-pad a small kernel to ``spatial_shape`` with its center at the origin."""
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != len(spatial_shape):
        raise DimensionError(f"kernel rank {kernel.ndim} does not match signal rank {len(spatial_shape)}")
    if any(k > n for k, n in zip(kernel.shape, spatial_shape)):
        raise DimensionError(f"kernel {kernel.shape} larger than signal {spatial_shape}")
    out = np.zeros(spatial_shape)
    idx = np.indices(kernel.shape).reshape(kernel.ndim, -1)
    centre = np.array([k // 2 for k in kernel.shape])[:, None]
    pos = tuple((idx - centre) % np.array(spatial_shape)[:, None])
    np.add.at(out, pos, kernel.reshape(-1))
    return out


def block_downsample_spectrum(xhat, s, axes=(-1,)):
    """Average the ``s`` aliased blocks of a spectrum along each of ``axes``.

    Equivalent to FFT(s-fold decimation(IFFT(xhat))), computed without leaving
    the frequency domain.
    """
    xhat = np.asarray(xhat)
    for ax in axes:
        n = xhat.shape[ax]
        if n % s:
            raise DimensionError(f"axis of length {n} not divisible by {s}")
        xhat = np.moveaxis(xhat, ax, -1)
        xhat = xhat.reshape(xhat.shape[:-1] + (s, n // s)).mean(axis=-2)
        xhat = np.moveaxis(xhat, -1, ax)
    return xhat


class LinearOperator:
    """Base class: subclasses define ``in_shape``, ``out_shape``, ``_apply`` and ``_adjoint``."""

    in_shape: tuple
    out_shape: tuple

    @property
    def in_dim(self):
        return int(np.prod(self.in_shape))

    @property
    def out_dim(self):
        return int(np.prod(self.out_shape))

    def _check(self, x, shape, what):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim < len(shape) or x.shape[x.ndim - len(shape):] != tuple(shape):
            raise DimensionError(f"{what} has shape {x.shape}, expected trailing {tuple(shape)}")
        return x

    def apply(self, x):
        return self._apply(self._check(x, self.in_shape, "input"))

    def adjoint(self, u):
        return self._adjoint(self._check(u, self.out_shape, "measurement"))

    def pseudo_inverse(self, y):
        raise CapabilityError(f"{type(self).__name__} has no pseudo-inverse")

    def isotropic_solve(self, residual, sigma2, r2):
        """Return ``(sigma2 I + r2 A A^T)^-1 residual`` in closed form.

        ``r2`` is a scalar or one value per batch element. Operators without a
        closed form raise :class:`CapabilityError`.
        """
        raise CapabilityError(f"no closed-form solve for {type(self).__name__}")

    def _bcast(self, r2, like):
        r2 = np.asarray(r2, dtype=np.float64)
        return r2.reshape(r2.shape + (1,) * (like.ndim - r2.ndim)) if r2.ndim else r2

    def dense(self):
        """Materialize ``A`` as an ``(out_dim, in_dim)`` matrix (small problems only)."""
        if self.in_dim > DENSE_LIMIT:
            raise CapabilityError(f"dense materialization refused for d={self.in_dim} > {DENSE_LIMIT}")
        eye = np.eye(self.in_dim).reshape((self.in_dim,) + tuple(self.in_shape))
        return self.apply(eye).reshape(self.in_dim, self.out_dim).T

    def dense_pinv(self):
        eye = np.eye(self.out_dim).reshape((self.out_dim,) + tuple(self.out_shape))
        return self.pseudo_inverse(eye).reshape(self.out_dim, self.in_dim).T


class IdentityOp(LinearOperator):
    def __init__(self, shape):
        self.in_shape = self.out_shape = tuple(shape)

    def _apply(self, x):
        return x.copy()

    _adjoint = _apply

    def pseudo_inverse(self, y):
        return self._check(y, self.out_shape, "measurement").copy()

    def isotropic_solve(self, residual, sigma2, r2):
        return residual / (sigma2 + self._bcast(r2, residual))


class MaskOp(LinearOperator):
    """Pixel selection ``D_m``; the measurement holds the kept values in C order."""

    def __init__(self, mask):
        self.mask = np.asarray(mask).astype(bool)
        self.mask.setflags(write=False)
        self.in_shape = self.mask.shape
        self.kept_count = int(self.mask.sum())
        if self.kept_count == 0:
            raise ValidationError("mask keeps no pixels")
        self.out_shape = (self.kept_count,)

    def _apply(self, x):
        return x[..., self.mask]

    def _adjoint(self, u):
        out = np.zeros(u.shape[:-1] + self.in_shape)
        out[..., self.mask] = u
        return out

    def pseudo_inverse(self, y):
        return self.adjoint(y)

    def zero_fill(self, y):
        return self.adjoint(y)

    def isotropic_solve(self, residual, sigma2, r2):
        # selection rows are orthonormal: A A^T = I
        return residual / (sigma2 + self._bcast(r2, residual))


class CircularConvOp(LinearOperator):
    """Circular convolution ``F^-1 diag(k_hat) F`` applied per channel."""

    def __init__(self, kernel, shape, threshold=DEFAULT_SPECTRAL_THRESHOLD):
        self.in_shape = self.out_shape = tuple(shape)
        self.axes = spatial_axes(self.in_shape)
        spatial = _spatial_shape(self.in_shape)
        self.kernel = np.asarray(kernel, dtype=np.float64)
        khat = np.fft.fftn(embed_kernel(self.kernel, spatial))
        if len(self.in_shape) == 3:
            khat = khat[..., None]
        self.khat = khat
        self.khat.setflags(write=False)
        self.spatial = spatial
        # half spectrum along the last transformed axis for real FFTs
        self._half = self._halve(khat)
        self.threshold = threshold

    def _halve(self, spectrum):
        ax = spectrum.ndim + self.axes[-1] if len(self.in_shape) == 3 else spectrum.ndim - 1
        n = spectrum.shape[ax]
        return np.take(spectrum, np.arange(n // 2 + 1), axis=ax)

    def _fft(self, x):
        return sfft.rfftn(x, axes=self.axes)

    def _ifft(self, xhat):
        return sfft.irfftn(xhat, s=self.spatial, axes=self.axes)

    def _apply(self, x):
        return self._ifft(self._half * self._fft(x))

    def _adjoint(self, u):
        return self._ifft(np.conj(self._half) * self._fft(u))

    def spectral_inverse(self):
        keep = np.abs(self.khat) >= self.threshold
        return np.where(keep, 1.0 / np.where(keep, self.khat, 1.0), 0.0)

    def pseudo_inverse(self, y):
        y = self._check(y, self.out_shape, "measurement")
        return self._ifft(self._halve(self.spectral_inverse()) * self._fft(y))

    def gram_spectrum(self):
        return np.abs(self.khat) ** 2

    def isotropic_solve(self, residual, sigma2, r2):
        r2 = self._bcast(r2, residual)
        return self._ifft(self._fft(residual) / (sigma2 + r2 * self._halve(self.gram_spectrum())))


class SuperResOp(LinearOperator):
    """Blur then keep the upper-left pixel of every ``s x s`` patch."""

    def __init__(self, kernel, shape, factor, threshold=DEFAULT_SPECTRAL_THRESHOLD):
        self.conv = CircularConvOp(kernel, shape, threshold)
        self.factor = int(factor)
        if self.factor < 1:
            raise ValidationError("super-resolution factor must be a positive integer")
        self.in_shape = tuple(shape)
        self.axes = self.conv.axes
        nsp = len(_spatial_shape(self.in_shape))
        if any(n % self.factor for n in self.in_shape[:nsp]):
            raise DimensionError(f"factor {self.factor} does not divide {self.in_shape[:nsp]}")
        self.out_shape = tuple(n // self.factor for n in self.in_shape[:nsp]) + self.in_shape[nsp:]
        self._slices = (Ellipsis,) + tuple(slice(None, None, self.factor) for _ in range(nsp))
        if len(self.in_shape) == 3:
            self._slices += (slice(None),)

    def downsample(self, x):
        return x[self._slices]

    def upsample_zero(self, u):
        out = np.zeros(u.shape[: u.ndim - len(self.out_shape)] + self.in_shape)
        out[self._slices] = u
        return out

    def _apply(self, x):
        return self.downsample(self.conv._apply(x))

    def _adjoint(self, u):
        return self.conv._adjoint(self.upsample_zero(u))

    def pseudo_inverse(self, y):
        # nearest-neighbour upsampling stands in for the exact pseudo-inverse
        y = self._check(y, self.out_shape, "measurement")
        nsp = len(_spatial_shape(self.in_shape))
        for k in range(nsp):
            y = np.repeat(y, self.factor, axis=self.axes[k])
        return y

    def gram_spectrum(self):
        # A A^T = D F^-1 diag(|k|^2) F D^T is circulant with the block-averaged spectrum
        g = np.abs(self.conv.khat) ** 2
        axes = (-1,) if len(self.in_shape) == 1 else (0, 1)
        return block_downsample_spectrum(g, self.factor, axes=axes)

    def isotropic_solve(self, residual, sigma2, r2):
        r2 = self._bcast(r2, residual)
        rhat = np.fft.fftn(residual, axes=self.axes)
        return np.fft.ifftn(rhat / (sigma2 + r2 * self.gram_spectrum()), axes=self.axes).real


class DenseOp(LinearOperator):
    """Explicit matrix acting on flattened signals; for tests and tiny problems."""

    def __init__(self, matrix, in_shape=None):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ValidationError("dense operator needs a 2-D matrix")
        self.in_shape = tuple(in_shape) if in_shape is not None else (self.matrix.shape[1],)
        if int(np.prod(self.in_shape)) != self.matrix.shape[1]:
            raise DimensionError("in_shape does not match matrix columns")
        self.out_shape = (self.matrix.shape[0],)

    def _apply(self, x):
        flat = x.reshape(x.shape[: x.ndim - len(self.in_shape)] + (-1,))
        return flat @ self.matrix.T

    def _adjoint(self, u):
        out = u @ self.matrix
        return out.reshape(u.shape[:-1] + self.in_shape)

    def pseudo_inverse(self, y):
        y = self._check(y, self.out_shape, "measurement")
        out = y @ np.linalg.pinv(self.matrix).T
        return out.reshape(y.shape[:-1] + self.in_shape)

    def dense(self):
        return self.matrix.copy()


class MeasurementModel:
    """``y = A x_0 + n`` with ``n ~ N(0, sigma^2 I)``."""

    def __init__(self, operator, sigma, y):
        if sigma < 0:
            raise ValidationError("measurement noise must be non-negative")
        self.operator = operator
        self.sigma = float(sigma)
        self.y = operator._check(y, operator.out_shape, "measurement")

    @classmethod
    def simulate(cls, operator, x0, sigma, rng):
        """Degrade ``x0``; returns the model and the noise realization."""
        clean = operator.apply(x0)
        noise = sigma * rng.standard_normal(clean.shape)
        return cls(operator, sigma, clean + noise), noise

    def residual(self, x):
        return self.y - self.operator.apply(x)
