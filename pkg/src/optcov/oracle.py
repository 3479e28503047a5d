"""Analytic Gaussian-mixture priors with exact posterior quantities.

All functions take noisy states ``x_t`` of shape ``(..., d)`` drawn from the
kernel ``x_t = s (x_0 + sigma eps)`` and work in the rescaled variable
``z = x_t / s``. Each component is stored through its eigendecomposition so
that every ``(Sigma0 + sigma^2 I)^-1`` is a diagonal rescaling.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from .errors import CapabilityError, DimensionError, ValidationError

__all__ = [
    "GmmPrior",
    "responsibilities",
    "gmm_posterior_mean",
    "gmm_posterior_covariance",
    "gmm_posterior_variance",
    "gmm_vjp",
    "gmm_log_marginal",
    "gmm_marginal_score",
    "gmm_log_likelihood_y",
    "gmm_likelihood_score",
    "gmm_conditional_posterior_mean",
    "gmm_reverse_variance",
    "gaussian_joint_conditional_mean",
    "DENSE_ORACLE_LIMIT",
]

DENSE_ORACLE_LIMIT = 64
_LOG2PI = np.log(2.0 * np.pi)


class GmmPrior:
    """Mixture ``sum_k pi_k N(mu_k, Sigma0_k)``.

    ``covs`` is either ``(K, d)`` (diagonal components) or ``(K, d, d)``.
    """

    def __init__(self, weights, means, covs):
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        mu = np.atleast_2d(np.asarray(means, dtype=np.float64))
        covs = np.asarray(covs, dtype=np.float64)
        K, d = mu.shape
        if w.shape != (K,):
            raise DimensionError(f"{w.size} weights for {K} components")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-10:
            raise ValidationError("weights must be positive and sum to one")
        if covs.shape == (K, d):
            self.diagonal = True
            if np.any(covs < 0):
                raise ValidationError("diagonal covariances must be non-negative")
            lam, U = covs.copy(), None
        elif covs.shape == (K, d, d):
            self.diagonal = False
            if not np.allclose(covs, np.swapaxes(covs, -1, -2), atol=1e-12):
                raise ValidationError("component covariances must be symmetric")
            lam, U = np.linalg.eigh(covs)
            if np.any(lam < -1e-10 * max(1.0, np.abs(lam).max())):
                raise ValidationError("component covariances must be positive semidefinite")
            lam = np.clip(lam, 0.0, None)
        else:
            raise DimensionError(f"covariances of shape {covs.shape} do not fit K={K}, d={d}")
        self.weights, self.means, self.covs = w, mu, covs
        self.eigvals, self.eigvecs = lam, U
        self.log_weights = np.log(w)
        for arr in (w, mu, covs, lam) + ((U,) if U is not None else ()):
            arr.setflags(write=False)

    @property
    def K(self):
        return self.weights.size

    @property
    def d(self):
        return self.means.shape[1]

    @classmethod
    def gaussian(cls, mean, cov):
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        cov = np.asarray(cov, dtype=np.float64)
        return cls([1.0], mean[None], cov[None])

    def dense_covs(self):
        if self.diagonal:
            return np.stack([np.diag(c) for c in self.covs])
        return np.array(self.covs)

    # eigen-coordinate helpers; arrays carry a component axis before the last
    def to_eig(self, v):
        if self.diagonal:
            return v
        return self._per_component(v, self.eigvecs)

    def from_eig(self, c):
        if self.diagonal:
            return c
        return self._per_component(c, np.swapaxes(self.eigvecs, -1, -2))

    def _per_component(self, v, mats):
        v = np.broadcast_to(v, np.broadcast_shapes(v.shape, (self.K, self.d)))
        flat = v.reshape(-1, self.K, self.d)
        out = np.empty_like(flat)
        for k in range(self.K):
            out[:, k] = flat[:, k] @ mats[k]
        return out.reshape(v.shape)

    def sample(self, n, rng):
        comp = rng.choice(self.K, size=n, p=self.weights)
        eps = rng.standard_normal((n, self.d)) * np.sqrt(self.eigvals[comp])
        if not self.diagonal:
            for k in range(self.K):
                sel = comp == k
                eps[sel] = eps[sel] @ self.eigvecs[k].T
        return self.means[comp] + eps, comp


def _check(prior, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != prior.d:
        raise DimensionError(f"state has trailing size {x.shape[-1]}, prior has d={prior.d}")
    return x


def _components(prior, x_t, s, sigma):
    """Per-component log evidence, posterior means, eigen-coordinate residuals."""
    z = _check(prior, x_t) / s
    s2 = sigma * sigma
    diff = z[..., None, :] - prior.means
    proj = prior.to_eig(diff)
    tot = prior.eigvals + s2
    logn = -0.5 * (np.sum(proj**2 / tot, axis=-1) + np.sum(np.log(tot), axis=-1) + prior.d * _LOG2PI)
    shrink = prior.eigvals / tot
    means = prior.means + prior.from_eig(shrink * proj)
    return z, logn, means, proj, tot


def responsibilities(prior, x_t, s, sigma):
    """Posterior component probabilities ``p(k | x_t)``, shape ``(..., K)``."""
    if sigma == 0:
        raise CapabilityError("responsibilities are degenerate at sigma = 0")
    _, logn, _, _, _ = _components(prior, x_t, s, sigma)
    logr = prior.log_weights + logn
    return np.exp(logr - logsumexp(logr, axis=-1, keepdims=True))


def gmm_posterior_mean(prior, x_t, s, sigma):
    """Exact ``E[x_0 | x_t]``."""
    if sigma < 0:
        raise ValidationError("sigma must be non-negative")
    if sigma == 0:
        return _check(prior, x_t) / s
    _, logn, means, _, _ = _components(prior, x_t, s, sigma)
    logr = prior.log_weights + logn
    w = np.exp(logr - logsumexp(logr, axis=-1, keepdims=True))
    return np.einsum("...k,...kd->...d", w, means)


def _comp_cov_diag(prior, sigma):
    lam = prior.eigvals
    post = lam * sigma**2 / (lam + sigma**2)
    if prior.diagonal:
        return post
    return np.einsum("kde,ke->kd", prior.eigvecs**2, post)


def gmm_posterior_variance(prior, x_t, s, sigma):
    """Diagonal of ``Cov[x_0 | x_t]`` without forming the full matrix."""
    x_t = _check(prior, x_t)
    if sigma == 0:
        return np.zeros_like(x_t)
    _, logn, means, _, _ = _components(prior, x_t, s, sigma)
    logr = prior.log_weights + logn
    w = np.exp(logr - logsumexp(logr, axis=-1, keepdims=True))
    mean = np.einsum("...k,...kd->...d", w, means)
    second = np.einsum("...k,...kd->...d", w, _comp_cov_diag(prior, sigma) + means**2)
    return np.clip(second - mean**2, 0.0, None)


def gmm_posterior_covariance(prior, x_t, s, sigma):
    """Exact ``Cov[x_0 | x_t]`` as a dense ``(..., d, d)`` array (``d <= 64``)."""
    if prior.d > DENSE_ORACLE_LIMIT:
        raise CapabilityError(f"dense posterior covariance refused for d={prior.d} > {DENSE_ORACLE_LIMIT}")
    x_t = _check(prior, x_t)
    if sigma == 0:
        return np.zeros(x_t.shape + (prior.d,))
    _, logn, means, _, _ = _components(prior, x_t, s, sigma)
    logr = prior.log_weights + logn
    w = np.exp(logr - logsumexp(logr, axis=-1, keepdims=True))
    lam = prior.eigvals
    post = lam * sigma**2 / (lam + sigma**2)
    if prior.diagonal:
        comp = np.einsum("kd,de->kde", post, np.eye(prior.d))
    else:
        comp = np.einsum("kde,ke,kfe->kdf", prior.eigvecs, post, prior.eigvecs)
    mean = np.einsum("...k,...kd->...d", w, means)
    second = np.einsum("...k,kde->...de", w, comp) + np.einsum("...k,...kd,...ke->...de", w, means, means)
    cov = second - mean[..., :, None] * mean[..., None, :]
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def gmm_vjp(prior, x_t, cotangent, s, sigma):
    """Exact ``(dE[x_0|x_t]/dx_t)^T c`` including responsibility derivatives."""
    c = np.asarray(cotangent, dtype=np.float64)
    if sigma == 0:
        return np.broadcast_to(c / s, np.broadcast_shapes(c.shape, np.shape(x_t))).copy()
    _, logn, means, proj, tot = _components(prior, x_t, s, sigma)
    logr = prior.log_weights + logn
    w = np.exp(logr - logsumexp(logr, axis=-1, keepdims=True))
    ck = prior.to_eig(np.broadcast_to(c[..., None, :], means.shape))
    mc = prior.from_eig(ck * prior.eigvals / tot)  # M_k c, M_k symmetric
    a = -prior.from_eig(proj / tot)  # d log N_k / dz
    abar = np.einsum("...k,...kd->...d", w, a)
    dots = np.einsum("...kd,...d->...k", means, c)
    out = np.einsum("...k,...kd->...d", w, mc)
    out = out + np.einsum("...k,...kd->...d", w * dots, a) - np.sum(w * dots, axis=-1)[..., None] * abar
    return out / s


def gmm_log_marginal(prior, x_t, s, sigma):
    """``log p_t(x_t)`` for the kernel ``N(s x_0, s^2 sigma^2 I)``."""
    if sigma == 0 and np.any(prior.eigvals == 0):
        raise CapabilityError("marginal density is degenerate")
    _, logn, _, _, _ = _components(prior, x_t, s, sigma)
    return logsumexp(prior.log_weights + logn, axis=-1) - prior.d * np.log(abs(s))


def gmm_marginal_score(prior, x_t, s, sigma):
    """Analytic ``grad log p_t(x_t)``."""
    _, logn, _, proj, tot = _components(prior, x_t, s, sigma)
    logr = prior.log_weights + logn
    w = np.exp(logr - logsumexp(logr, axis=-1, keepdims=True))
    a = -prior.from_eig(proj / tot)
    return np.einsum("...k,...kd->...d", w, a) / s


def _dense_op(operator, d):
    if isinstance(operator, np.ndarray):
        A = operator
    else:
        A = operator.dense()
    A = np.asarray(A, dtype=np.float64)
    if A.shape[1] != d:
        raise DimensionError(f"operator has {A.shape[1]} columns, prior has d={d}")
    return A


def _dense_comp_covs(prior, sigma):
    lam = prior.eigvals
    post = lam * sigma**2 / (lam + sigma**2)
    if prior.diagonal:
        return np.einsum("kd,de->kde", post, np.eye(prior.d))
    return np.einsum("kde,ke,kfe->kdf", prior.eigvecs, post, prior.eigvecs)


def _conditional_parts(prior, x_t, y, A, noise_sigma, s, sigma):
    if prior.d > DENSE_ORACLE_LIMIT:
        raise CapabilityError(f"conditional oracle refused for d={prior.d} > {DENSE_ORACLE_LIMIT}")
    _, logn, means, proj, tot = _components(prior, x_t, s, sigma)
    C = _dense_comp_covs(prior, sigma)
    S = np.einsum("md,kde,ne->kmn", A, C, A) + noise_sigma**2 * np.eye(A.shape[0])
    L = np.linalg.cholesky(S)
    r = np.asarray(y, dtype=np.float64)[..., None, :] - np.einsum("md,...kd->...km", A, means)
    Sinv_r = np.einsum("kmn,...kn->...km", np.linalg.inv(S), r)
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    logg = -0.5 * (np.sum(r * Sinv_r, axis=-1) + logdet + A.shape[0] * _LOG2PI)
    return logn, means, proj, tot, C, Sinv_r, logg


def gmm_log_likelihood_y(prior, x_t, operator, y, noise_sigma, s, sigma):
    """``log p_t(y | x_t)`` for ``y = A x_0 + n``, ``n ~ N(0, noise_sigma^2 I)``."""
    A = _dense_op(operator, prior.d)
    logn, _, _, _, _, _, logg = _conditional_parts(prior, x_t, y, A, noise_sigma, s, sigma)
    lw = prior.log_weights + logn
    return logsumexp(lw + logg, axis=-1) - logsumexp(lw, axis=-1)


def gmm_likelihood_score(prior, x_t, operator, y, noise_sigma, s, sigma):
    """Analytic ``grad_{x_t} log p_t(y | x_t)``."""
    A = _dense_op(operator, prior.d)
    logn, means, proj, tot, C, Sinv_r, logg = _conditional_parts(prior, x_t, y, A, noise_sigma, s, sigma)
    lw = prior.log_weights + logn
    w = np.exp(lw - logsumexp(lw, axis=-1, keepdims=True))
    rho = np.exp(lw + logg - logsumexp(lw + logg, axis=-1, keepdims=True))
    a = -prior.from_eig(proj / tot)
    g = np.einsum("md,...km->...kd", A, Sinv_r)  # A^T S_k^-1 r_k
    Mg = prior.from_eig(prior.to_eig(g) * prior.eigvals / tot)
    out = np.einsum("...k,...kd->...d", rho, a + Mg) - np.einsum("...k,...kd->...d", w, a)
    return out / s


def gmm_conditional_posterior_mean(prior, x_t, operator, y, noise_sigma, s, sigma):
    """Exact ``E[x_0 | x_t, y]`` by per-component Gaussian conditioning."""
    A = _dense_op(operator, prior.d)
    if sigma == 0:
        return _check(prior, x_t) / s
    logn, means, _, _, C, Sinv_r, logg = _conditional_parts(prior, x_t, y, A, noise_sigma, s, sigma)
    lw = prior.log_weights + logn + logg
    rho = np.exp(lw - logsumexp(lw, axis=-1, keepdims=True))
    cm = means + np.einsum("kde,me,...km->...kd", C, A, Sinv_r)
    return np.einsum("...k,...kd->...d", rho, cm)


def gmm_reverse_variance(prior, x_t, t, sched):
    """Optimal diagonal DDPM reverse variances ``beta_tilde_t + c_t^2 r*_t^2``."""
    if not prior.diagonal:
        raise CapabilityError("reverse variances need a diagonal-covariance prior")
    s = np.sqrt(sched.alpha_bar(t))
    sigma = np.sqrt(sched.beta_bar(t) / sched.alpha_bar(t))
    r2 = gmm_posterior_variance(prior, x_t, s, sigma)
    return sched.beta_tilde(t) + sched.posterior_coef(t) ** 2 * r2


def gaussian_joint_conditional_mean(mean, cov, x_t, s, sigma, A=None, y=None, noise_sigma=None):
    """``E[x_0 | x_t (, y)]`` for a Gaussian prior by conditioning the joint Gaussian.

    Works on the stacked vector ``(x_0, x_t, y)`` directly and shares no code
    with the mixture routines above.
    """
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    d = mean.size
    blocks_mean = [s * mean]
    cross = [s * cov]
    obs = [np.asarray(x_t, dtype=np.float64)]
    if A is None:
        joint = s * s * (cov + sigma**2 * np.eye(d))
    else:
        A = np.asarray(A, dtype=np.float64)
        m = A.shape[0]
        blocks_mean.append(A @ mean)
        cross.append(cov @ A.T)
        obs.append(np.asarray(y, dtype=np.float64))
        joint = np.block([
            [s * s * (cov + sigma**2 * np.eye(d)), s * cov @ A.T],
            [s * A @ cov, A @ cov @ A.T + noise_sigma**2 * np.eye(m)],
        ])
    cross = np.concatenate(cross, axis=1)
    resid = np.concatenate(obs, axis=-1) - np.concatenate(blocks_mean)
    return mean + np.linalg.solve(joint, resid[..., None])[..., 0] @ cross.T
