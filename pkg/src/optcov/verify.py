"""Executable verification suites.

Each suite returns a list of :class:`Check` records comparing a library
result with an independent reference at a fixed tolerance. ``run_suites``
drives them for the ``verify`` command.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import oracle
from .covariance import (
    DenseCovariance,
    DiagonalCovariance,
    DiagSpatial,
    DiagTransform,
    ExactPosterior,
    IsoPigdm,
    IsotropicCovariance,
    TransformDiagonalCovariance,
    convert_reverse_variance,
    diagonal_gaussian_nll,
    estimate_analytic_variance,
    fit_transform_variance,
)
from .denoisers import FunctionDenoiser, GmmDenoiser
from .guidance import (
    GuidanceConfig,
    compute_v,
    ddnm_solution,
    dense_v,
    proximal_solution_dense,
    type2_conditional_mean,
)
from .metrics import mad
from .operators import CircularConvOp, DenseOp, MaskOp, MeasurementModel, SuperResOp, block_downsample_spectrum
from .sampler import SamplerConfig, heun_step, sample_heun, sigma_grid, solve_inverse_problem
from .schedule import linear_betas, tweedie_score
from .transforms import HaarBasis, IdentityBasis

__all__ = ["Check", "SUITES", "run_suites", "format_check"]


@dataclass
class Check:
    criterion: int
    name: str
    value: float
    tol: float
    passed: bool
    detail: str = ""


def _le(criterion, name, value, tol, detail=""):
    value = float(value)
    return Check(criterion, name, value, tol, bool(value <= tol), detail)


def format_check(c):
    status = "PASS" if c.passed else "FAIL"
    extra = f"  ({c.detail})" if c.detail else ""
    return f"[{status}] criterion {c.criterion:>2} {c.name}: {c.value:.3e} (limit {c.tol:.1e}){extra}"


# ---------------------------------------------------------------- helpers


def random_gmm(rng, d, K, full=True):
    weights = rng.dirichlet(np.ones(K) * 2.0)
    means = rng.standard_normal((K, d)) * 1.5
    if full:
        B = rng.standard_normal((K, d, d))
        covs = B @ np.swapaxes(B, -1, -2) / d + 0.2 * np.eye(d)
    else:
        covs = rng.uniform(0.2, 1.5, (K, d))
    return oracle.GmmPrior(weights, means, covs)


def _fd_grad(f, x, h=1e-5):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def dft_matrix(n):
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n)


# ---------------------------------------------------------------- suites


def suite_tweedie(seed=0):
    """Unconditional and conditional Tweedie identities against finite differences."""
    rng = np.random.default_rng(seed)
    err_u = err_c = 0.0
    for d in (1, 2, 3, 4):
        for K in (1, 2, 3):
            prior = random_gmm(rng, d, K)
            s, sigma = rng.uniform(0.5, 1.0), rng.uniform(0.4, 2.0)
            A = rng.standard_normal((max(1, d - 1), d))
            y = rng.standard_normal(A.shape[0])
            ns = 0.5
            for _ in range(3):
                x = s * (prior.sample(1, rng)[0][0] + sigma * rng.standard_normal(d))
                fd = _fd_grad(lambda z: oracle.gmm_log_marginal(prior, z, s, sigma), x)
                got = tweedie_score(x, oracle.gmm_posterior_mean(prior, x, s, sigma), s, sigma)
                err_u = max(err_u, np.max(np.abs(fd - got)))

                def log_cond(z):
                    return (oracle.gmm_log_likelihood_y(prior, z, A, y, ns, s, sigma)
                            + oracle.gmm_log_marginal(prior, z, s, sigma))

                fd = _fd_grad(log_cond, x)
                got = tweedie_score(
                    x, oracle.gmm_conditional_posterior_mean(prior, x, A, y, ns, s, sigma), s, sigma)
                err_c = max(err_c, np.max(np.abs(fd - got)))
    return [_le(1, "tweedie marginal score", err_u, 1e-6),
            _le(1, "tweedie conditional score", err_c, 1e-6)]


def suite_likelihood_drift(seed=0):
    """Posterior mean plus scaled likelihood score equals the conditional mean."""
    rng = np.random.default_rng(seed)
    err = 0.0
    for _ in range(100):
        d = int(rng.integers(1, 5))
        m = int(rng.integers(1, d + 1))
        B = rng.standard_normal((d, d))
        cov = B @ B.T / d + 0.3 * np.eye(d)
        mean = rng.standard_normal(d)
        prior = oracle.GmmPrior.gaussian(mean, cov)
        A = rng.standard_normal((m, d))
        s, sigma, ns = rng.uniform(0.3, 1.0), rng.uniform(0.1, 3.0), rng.uniform(0.1, 1.0)
        x = s * (mean + rng.standard_normal(d) * (1 + sigma))
        y = A @ mean + rng.standard_normal(m)
        lhs = (oracle.gmm_posterior_mean(prior, x, s, sigma)
               + s * sigma**2 * oracle.gmm_likelihood_score(prior, x, A, y, ns, s, sigma))
        rhs = oracle.gaussian_joint_conditional_mean(mean, cov, x, s, sigma, A, y, ns)
        err = max(err, np.max(np.abs(lhs - rhs)))
    return [_le(2, "posterior mean + likelihood score", err, 1e-8)]


def suite_woodbury(seed=0):
    """Proximal form and gain form of the Type II solution agree."""
    rng = np.random.default_rng(seed)
    err = 0.0
    for _ in range(100):
        d = int(rng.integers(2, 33))
        m = int(rng.integers(1, d + 1))
        A = rng.standard_normal((m, d)) / np.sqrt(d)
        B = rng.standard_normal((d, d))
        Sigma = B @ B.T / d + 0.5 * np.eye(d)
        ns = rng.uniform(0.2, 1.0)
        D = rng.standard_normal(d)
        y = rng.standard_normal(m)
        meas = MeasurementModel(DenseOp(A), ns, y)
        cov = DenseCovariance(Sigma, (d,))
        v, _ = compute_v(meas, D, cov, method="dense")
        gain = D + Sigma @ v
        prox = proximal_solution_dense(D, y, A, Sigma, ns)
        err = max(err, np.max(np.abs(gain - prox)))
    return [_le(3, "woodbury equivalence (100 instances)", err, 1e-8)]


def suite_block_downsampling(seed=0):
    """Block averaging of spectra equals DFT of the decimated inverse DFT."""
    rng = np.random.default_rng(seed)
    err1 = err2 = 0.0
    for n in (8, 16, 32):
        for s in (2, 4):
            xhat = rng.standard_normal(n) + 1j * rng.standard_normal(n)
            ref = dft_matrix(n // s) @ ((np.conj(dft_matrix(n)) / n) @ xhat)[::s]
            err1 = max(err1, np.max(np.abs(ref - block_downsample_spectrum(xhat, s))))
            X = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
            Finv = np.conj(dft_matrix(n)) / n
            spatial = (Finv @ X @ Finv.T)[::s, ::s]
            ref2 = dft_matrix(n // s) @ spatial @ dft_matrix(n // s).T
            got2 = block_downsample_spectrum(X, s, axes=(0, 1))
            err2 = max(err2, np.max(np.abs(ref2 - got2)))
    return [_le(4, "block downsampling identity 1-D", err1, 1e-10), _le(4, "block downsampling identity 2-D separable", err2, 1e-10)]


def _blur_kernel(rng, size=3):
    k = rng.uniform(0.0, 1.0, (size, size))
    return k / k.sum()


def suite_compute_v(seed=0):
    """Closed-form and CG evaluations of v against dense linear algebra."""
    rng = np.random.default_rng(seed)
    shape = (16, 16)
    closed = {}
    ops = {
        "inpaint": MaskOp(rng.uniform(size=shape) < 0.5),
        "deblur": CircularConvOp(_blur_kernel(rng), shape),
        "sr": SuperResOp(_blur_kernel(rng), shape, 2),
    }
    for name, op in ops.items():
        err = 0.0
        for _ in range(3):
            D = rng.uniform(-1, 1, shape)
            meas = MeasurementModel(op, rng.uniform(0.05, 0.5), rng.standard_normal(op.out_shape))
            cov = IsotropicCovariance(rng.uniform(0.01, 1.0), shape)
            v, stats = compute_v(meas, D, cov)
            assert stats.method == "closed-form"
            err = max(err, np.max(np.abs(v - dense_v(meas, D, cov))))
        closed[name] = err
    checks = [_le(5, f"closed-form v ({k}, d=256)", e, 1e-8) for k, e in closed.items()]
    shape = (8, 8)
    small = {
        "inpaint": MaskOp(rng.uniform(size=shape) < 0.5),
        "deblur": CircularConvOp(_blur_kernel(rng), shape),
        "sr": SuperResOp(_blur_kernel(rng), shape, 2),
    }
    for cname in ("diagonal", "transform"):
        err = 0.0
        for op in small.values():
            D = rng.uniform(-1, 1, shape)
            meas = MeasurementModel(op, 0.1, rng.standard_normal(op.out_shape))
            r2 = rng.uniform(0.05, 1.0, shape)
            cov = (DiagonalCovariance(r2, shape) if cname == "diagonal"
                   else TransformDiagonalCovariance(HaarBasis(shape, 2), r2, shape))
            v, stats = compute_v(meas, D, cov, method="cg", tol=1e-4)
            ref = dense_v(meas, D, cov)
            err = max(err, np.linalg.norm(v - ref) / np.linalg.norm(ref))
        checks.append(_le(5, f"CG v vs dense ({cname} covariance, relative)", err, 1e-3))
    return checks


def exact_reverse_variance(lam, t, sched):
    """``Var[x_{t-1} | x_t]`` for a Gaussian prior with variances ``lam`` by joint conditioning."""
    ab_prev, bb_prev = sched.alpha_bar(t - 1), sched.beta_bar(t - 1)
    a_t = 1.0 - sched.beta(t)
    var_prev = ab_prev * lam + bb_prev
    var_t = a_t * var_prev + sched.beta(t)
    # var_prev - a_t var_prev^2 / var_t, rearranged to avoid cancellation
    return var_prev * sched.beta(t) / var_t


def suite_convert_roundtrip(seed=0):
    """Converting exact reverse variances recovers exact posterior variances."""
    rng = np.random.default_rng(seed)
    sched = linear_betas(100, 1e-3, 0.2)
    lam = rng.uniform(0.2, 2.0, 4)
    prior = oracle.GmmPrior([1.0], [rng.standard_normal(4)], [lam])
    err_joint = err_oracle = 0.0
    for t in range(1, sched.T + 1):
        ab = sched.alpha_bar(t)
        sigma2 = sched.beta_bar(t) / ab
        exact_r2 = lam * sigma2 / (lam + sigma2)
        r2, _ = convert_reverse_variance(exact_reverse_variance(lam, t, sched), t, sched)
        err_joint = max(err_joint, np.max(np.abs(r2 - exact_r2)))
        x = np.sqrt(ab) * rng.standard_normal(4)
        r2o, _ = convert_reverse_variance(oracle.gmm_reverse_variance(prior, x, t, sched), t, sched)
        err_oracle = max(err_oracle, np.max(np.abs(r2o - exact_r2)))
    return [_le(6, "reverse-variance conversion (joint Gaussian, T=100)", err_joint, 1e-10),
            _le(6, "reverse-variance conversion (oracle forward map)", err_oracle, 1e-10)]


def suite_ddnm_limit(seed=0):
    """Type II approaches the range/null-space solution as the noise vanishes."""
    rng = np.random.default_rng(seed)
    shape = (32, 32)
    x_true = np.clip(rng.standard_normal(shape) * 0.5, -1, 1)
    D = np.clip(rng.standard_normal(shape) * 0.5, -1, 1)
    k = np.zeros((3, 3))
    k[1, 1] = 0.6
    k[0, 1] = k[2, 1] = k[1, 0] = k[1, 2] = 0.1
    ops = {"inpaint": MaskOp(rng.uniform(size=shape) < 0.5), "deblur": CircularConvOp(k, shape)}
    checks = []
    den = FunctionDenoiser(lambda x, sigma, scale: D, shape)
    cfg = GuidanceConfig(mode="type2", covariance=IsoPigdm())
    for name, op in ops.items():
        noise = rng.standard_normal(op.out_shape)
        mads = []
        for sigma in (1e-2, 1e-3, 1e-4):
            meas = MeasurementModel(op, sigma, op.apply(x_true) + sigma * noise)
            # diffusion noise level 1 gives the isotropic variance 0.5
            x0 = type2_conditional_mean(D, den, meas, cfg, 1.0, 1.0).x0
            mads.append(mad(x0, ddnm_solution(D, meas)))
        mono = all(b < a for a, b in zip(mads, mads[1:]))
        checks.append(Check(7, f"DDNM limit monotone ({name})", float(mono), 1.0, mono,
                            "MAD " + ", ".join(f"{m:.2e}" for m in mads)))
        checks.append(_le(7, f"DDNM limit MAD at sigma=1e-4 ({name})", mads[-1], 1e-6))
    return checks


def suite_mc_variance(seed=0):
    """Monte-Carlo scalar variance against the conjugate closed form."""
    rng = np.random.default_rng(seed)
    d = 16
    prior = oracle.GmmPrior([1.0], [np.zeros(d)], [np.ones(d)])
    den = GmmDenoiser(prior)
    samples = rng.standard_normal((10_000, d))
    targets = (0.1, 1.0, 10.0)
    grid = np.union1d(np.geomspace(0.002, 80.0, 1000 - len(targets)), targets)
    table = estimate_analytic_variance(den, samples, grid=grid, seed=seed + 1)
    checks = []
    for s in targets:
        exact = s * s / (1 + s * s)
        checks.append(_le(8, f"MC variance at sigma={s:g} (relative)", abs(table.lookup(s) / exact - 1), 0.02))
    return checks


def heun_order(steps=(25, 50, 100)):
    """Endpoint errors of Heun on ``dx/dt = x t / (1 + t^2)`` from ``x(80) = 1``."""
    errs = []
    for n in steps:
        cfg = SamplerConfig(steps=n)
        grid = sigma_grid(cfg)
        x = 1.0
        for a, b in zip(grid[:-1], grid[1:]):
            x = heun_step(x, a, b, lambda z, t: z / (1 + t * t))
        errs.append(abs(x - 1.0 / np.sqrt(1 + 80.0**2)))
    return errs


def suite_sampler_moments(seed=0):
    """Convergence order, unconditional mixture weights and conditional moments."""
    errs = heun_order()
    orders = [np.log2(a / b) for a, b in zip(errs, errs[1:])]
    checks = [Check(9, "Heun empirical order (25/50/100 steps)", min(orders), 1.9, min(orders) >= 1.9,
                    "orders " + ", ".join(f"{o:.3f}" for o in orders))]

    n = 10_000
    prior = oracle.GmmPrior([0.3, 0.7], [[2.8, 0.0], [-1.2, 0.0]], [[0.25, 0.25], [0.25, 0.25]])
    den = GmmDenoiser(prior)
    rng = np.random.default_rng(seed)
    cfg = SamplerConfig()
    traj = sample_heun(lambda x, t: den.mean(x, t), cfg.sigma_max * rng.standard_normal((n, 2)), cfg)
    frac = float(np.mean(traj.final[:, 0] > 0.8))
    z = abs(frac - 0.3) / np.sqrt(0.3 * 0.7 / n)
    checks.append(_le(9, "unconditional component weight (|z|)", z, 3.0, f"fraction {frac:.4f} vs 0.3"))

    B = rng.standard_normal((4, 4))
    C = B @ B.T / 4 + 0.3 * np.eye(4)
    mu = rng.standard_normal(4)
    den = GmmDenoiser(oracle.GmmPrior.gaussian(mu, C))
    op = MaskOp(np.array([True, False, True, False]))
    A, ns = op.dense(), 0.1
    y = A @ (mu + np.linalg.cholesky(C) @ rng.standard_normal(4)) + ns * rng.standard_normal(2)
    S = A @ C @ A.T + ns**2 * np.eye(2)
    gain = C @ A.T @ np.linalg.inv(S)
    m_exact, P_exact = mu + gain @ (y - A @ mu), C - gain @ A @ C
    meas = MeasurementModel(op, ns, y)
    gcfg = GuidanceConfig(mode="type2", covariance=ExactPosterior())
    # a wide start keeps the offset of the zero-mean initialization below 0.2 standard errors
    scfg = SamplerConfig(seed=seed + 1, sigma_max=500.0)
    final = solve_inverse_problem(meas, den, gcfg, scfg, batch=n).final
    zmean = np.max(np.abs(final.mean(0) - m_exact) / np.sqrt(np.diag(P_exact) / n))
    cov_err = np.max(np.abs(np.cov(final.T) - P_exact)) / np.max(np.abs(P_exact))
    checks.append(_le(9, "conditional mean (max |z|)", zmean, 3.0))
    checks.append(_le(9, "conditional covariance (relative)", cov_err, 0.05))
    return checks


def haar_gaussian_prior(rng, shape=(8, 8), levels=3):
    """Zero-mean Gaussian whose covariance is diagonal in the Haar basis."""
    basis = HaarBasis(shape, levels)
    d = int(np.prod(shape))
    psi = basis.inverse(np.eye(d).reshape((d,) + shape)).reshape(d, d).T
    scale = np.full(shape, 0.02)
    h, w = shape
    for lev, val in enumerate((0.1, 0.4, 1.0)[:levels], 1):
        scale[: h >> lev, : w >> lev] = val
    lam = scale.reshape(-1) * rng.uniform(0.5, 1.5, d)
    cov = psi @ np.diag(lam) @ psi.T
    return oracle.GmmPrior.gaussian(np.zeros(d), 0.5 * (cov + cov.T)), basis


def suite_transform_cov(seed=0, n_fixtures=20, samples_per_fixture=32):
    """Haar-diagonal covariance beats pixel-diagonal on a Haar-diagonal prior."""
    rng = np.random.default_rng(seed)
    shape = (8, 8)
    prior, basis = haar_gaussian_prior(rng, shape)
    den = GmmDenoiser(prior, shape)
    scfg = SamplerConfig(seed=seed + 7)
    grid = sigma_grid(scfg)[:-1]
    fit_t = fit_transform_variance(prior, basis, grid, 10_000, seed=seed + 1)
    fit_s = fit_transform_variance(prior, IdentityBasis(shape), grid, 10_000, seed=seed + 2)
    nll_t = nll_s = 0.0
    for sigma in grid:
        x0 = prior.sample(5000, rng)[0].reshape((-1,) + shape)
        res = x0 - den.mean(x0 + sigma * rng.standard_normal(x0.shape), sigma)
        nll_t += diagonal_gaussian_nll(res, TransformDiagonalCovariance(basis, fit_t.lookup(sigma), shape))
        nll_s += diagonal_gaussian_nll(res, DiagonalCovariance(fit_s.lookup(sigma), shape))
    checks = [Check(10, "held-out objective transform < spatial", nll_t - nll_s, 0.0, nll_t < nll_s,
                    f"transform {nll_t:.2f}, spatial {nll_s:.2f}")]

    k = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]) / 16.0
    op = CircularConvOp(k, shape)
    x_true = prior.sample(n_fixtures, rng)[0].reshape((n_fixtures, 1) + shape)
    meas, _ = MeasurementModel.simulate(op, x_true, 0.05, rng)
    mse = {}
    for name, model in (("transform", DiagTransform(basis, table=fit_t)), ("spatial", DiagSpatial(table=fit_s))):
        gcfg = GuidanceConfig(mode="type2", covariance=model, switch_sigma=np.inf)
        final = solve_inverse_problem(meas, den, gcfg, scfg, batch=(n_fixtures, samples_per_fixture)).final
        recon = final.mean(axis=1, keepdims=True)
        mse[name] = np.mean((recon - x_true) ** 2, axis=(1, 2, 3))
    diff = float(np.mean(mse["transform"] - mse["spatial"]))
    wins = int(np.sum(mse["transform"] <= mse["spatial"]))
    checks.append(Check(10, "paired reconstruction MSE transform - spatial", diff, 0.0, diff <= 0.0,
                        f"transform {mse['transform'].mean():.5f}, spatial {mse['spatial'].mean():.5f}, "
                        f"transform no worse on {wins}/{n_fixtures}"))
    return checks


SUITES = {
    "tweedie": suite_tweedie,
    "likelihood-drift": suite_likelihood_drift,
    "woodbury": suite_woodbury,
    "block-downsampling": suite_block_downsampling,
    "compute-v": suite_compute_v,
    "convert-roundtrip": suite_convert_roundtrip,
    "ddnm-limit": suite_ddnm_limit,
    "mc-variance": suite_mc_variance,
    "sampler-moments": suite_sampler_moments,
    "transform-cov": suite_transform_cov,
}

# accepted alternate suite names
ALIASES = {"lemma-b1": "block-downsampling"}


def run_suites(names, seed=0, emit=None):
    """Run suites by name (``"all"`` expands to every suite); returns all checks."""
    if "all" in names:
        names = list(SUITES)
    names = [ALIASES.get(n, n) for n in names]
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        from .errors import ValidationError

        raise ValidationError(f"unknown suite(s) {unknown}; choose from {sorted(SUITES) + sorted(ALIASES)} or all")
    checks = []
    for name in names:
        start = time.perf_counter()
        result = SUITES[name](seed=seed)
        elapsed = time.perf_counter() - start
        for c in result:
            c.detail = (c.detail + "; " if c.detail else "") + f"suite {name} {elapsed:.2f}s"
            if emit is not None:
                emit(c)
        checks.extend(result)
    return checks
