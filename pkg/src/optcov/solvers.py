"""Batched conjugate gradients for symmetric positive-definite systems."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SolverError

__all__ = ["CgResult", "conjugate_gradient"]


@dataclass
class CgResult:
    x: np.ndarray
    iterations: int
    residual: float


def _dot(a, b, ndim):
    axes = tuple(range(a.ndim - ndim, a.ndim))
    return np.sum(a * b, axis=axes)


def conjugate_gradient(matvec, b, core_ndim, tol=1e-4, max_iter=1000):
    """Solve ``M x = b`` for every batch element of ``b``.

    ``core_ndim`` trailing axes form one right-hand side; leading axes are
    independent systems. Starts from zero without preconditioning and stops
    each system once ``||r|| <= tol * ||b||``. Raises :class:`SolverError`
    with the worst relative residual when ``max_iter`` is exhausted.
    """
    b = np.asarray(b, dtype=np.float64)
    expand = lambda s: s.reshape(s.shape + (1,) * core_ndim)  # noqa: E731
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    bnorm = np.sqrt(_dot(b, b, core_ndim))
    rs = _dot(r, r, core_ndim)
    target = (tol * bnorm) ** 2
    active = rs > target
    it = 0
    while np.any(active):
        if it >= max_iter:
            rel = float(np.max(np.sqrt(rs) / np.where(bnorm > 0, bnorm, 1.0)))
            raise SolverError(f"CG did not converge in {max_iter} iterations (relative residual {rel:.3e})",
                              residual=rel, iterations=it)
        mp = matvec(p)
        pmp = _dot(p, mp, core_ndim)
        alpha = np.where(active, rs / np.where(active, pmp, 1.0), 0.0)
        x = x + expand(alpha) * p
        r = r - expand(alpha) * mp
        rs_new = _dot(r, r, core_ndim)
        beta = np.where(active, rs_new / np.where(active, rs, 1.0), 0.0)
        p = np.where(expand(active), r + expand(beta) * p, p)
        rs = np.where(active, rs_new, rs)
        active = active & (rs > target)
        it += 1
    rel = np.sqrt(rs) / np.where(bnorm > 0, bnorm, 1.0)
    return CgResult(x=x, iterations=it, residual=float(np.max(rel)) if rel.size else 0.0)
