"""Orthonormal transform bases ``Psi`` for transform-domain covariances.

``forward`` returns ``theta = Psi^T x`` and ``inverse`` returns ``Psi theta``.
Coefficients share the signal's shape; for Haar they are laid out in the
usual pyramid (approximation band in the leading corner).
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, ValidationError
from .operators import spatial_axes

__all__ = ["IdentityBasis", "HaarBasis"]

_R2 = np.sqrt(0.5)


class IdentityBasis:
    kind = "identity"

    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, x):
        return np.array(x, dtype=np.float64, copy=True)

    def inverse(self, theta):
        return np.array(theta, dtype=np.float64, copy=True)


def _analysis(x, axis, n):
    """One Haar level on the leading ``n`` entries of ``axis``, in place."""
    part = np.moveaxis(x, axis, -1)[..., :n]
    pairs = part.reshape(part.shape[:-1] + (n // 2, 2))
    a = (pairs[..., 0] + pairs[..., 1]) * _R2
    d = (pairs[..., 0] - pairs[..., 1]) * _R2
    part[..., : n // 2] = a
    part[..., n // 2:] = d


def _synthesis(x, axis, n):
    part = np.moveaxis(x, axis, -1)[..., :n]
    a = part[..., : n // 2].copy()
    d = part[..., n // 2:].copy()
    part[..., 0::2] = (a + d) * _R2
    part[..., 1::2] = (a - d) * _R2


class HaarBasis:
    """Separable orthonormal Haar wavelet with ``levels`` decomposition levels."""

    kind = "haar"

    def __init__(self, shape, levels=1):
        self.shape = tuple(shape)
        self.levels = int(levels)
        if self.levels < 1:
            raise ValidationError("Haar basis needs at least one level")
        self.axes = spatial_axes(self.shape)
        nsp = 1 if len(self.shape) == 1 else 2
        self._sizes = self.shape[:nsp]
        step = 2**self.levels
        if any(n % step for n in self._sizes):
            raise DimensionError(f"spatial size {self._sizes} not divisible by 2**{self.levels}")

    def _prep(self, x):
        x = np.array(x, dtype=np.float64, copy=True)
        if x.shape[x.ndim - len(self.shape):] != self.shape:
            raise DimensionError(f"signal shape {x.shape} does not end with {self.shape}")
        return x

    def _band(self, x, axes, sizes):
        """View of the approximation band that the next level works on."""
        sl = [slice(None)] * x.ndim
        for ax, n in zip(axes, sizes):
            sl[ax] = slice(0, n)
        return x[tuple(sl)]

    def forward(self, x):
        x = self._prep(x)
        axes = [x.ndim + a for a in self.axes]
        for level in range(self.levels):
            sizes = [n >> level for n in self._sizes]
            band = self._band(x, axes, sizes)
            for ax, n in zip(axes, sizes):
                _analysis(band, ax, n)
        return x

    def inverse(self, theta):
        x = self._prep(theta)
        axes = [x.ndim + a for a in self.axes]
        for level in reversed(range(self.levels)):
            sizes = [n >> level for n in self._sizes]
            band = self._band(x, axes, sizes)
            for ax, n in zip(axes, sizes):
                _synthesis(band, ax, n)
        return x
