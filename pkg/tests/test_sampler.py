import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from optcov import (
    ExactPosterior,
    GmmDenoiser,
    GmmPrior,
    GuidanceConfig,
    IdentityOp,
    MaskOp,
    MeasurementModel,
    SamplerConfig,
    churn_gamma,
    convert_reverse_variance,
    ddpm_ancestral_step,
    ddpm_reverse_mean,
    heun_step,
    heun_stochastic_step,
    linear_betas,
    rng_streams,
    sample_ancestral,
    sample_heun,
    sigma_grid,
    solve_inverse_problem,
)
from optcov.errors import DomainError, ValidationError


def linear_mean(x, t):
    return x / (1 + t * t)


def run_linear(x_t, steps):
    grid = sigma_grid(SamplerConfig(steps=steps))
    x = x_t
    for a, b in zip(grid[:-1], grid[1:]):
        x = heun_step(x, a, b, linear_mean)
    return x


def test_grid_examples():
    np.testing.assert_array_equal(sigma_grid(SamplerConfig(steps=1)), [80.0, 0.0])
    grid = sigma_grid(SamplerConfig(steps=3, rho=1.0, sigma_min=1.0, sigma_max=3.0))
    np.testing.assert_allclose(grid, [3.0, 2.0, 1.0, 0.0], atol=1e-14)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 300), st.floats(1e-4, 1.0), st.floats(1.5, 500.0), st.floats(0.5, 10.0))
def test_grid_strictly_decreasing(steps, smin, smax, rho):
    grid = sigma_grid(SamplerConfig(steps=steps, sigma_min=smin, sigma_max=smax, rho=rho))
    assert grid.size == steps + 1 and grid[-1] == 0.0
    assert np.all(np.diff(grid) < 0)
    assert grid[0] == pytest.approx(smax)


def test_heun_fixed_point():
    x = np.array([1.0, -2.0])
    np.testing.assert_array_equal(heun_step(x, 2.0, 1.0, lambda z, t: z), x)


def test_heun_rejects_bad_times():
    with pytest.raises(DomainError):
        heun_step(np.ones(1), 0.0, 0.0, linear_mean)
    with pytest.raises(DomainError):
        heun_step(np.ones(1), 1.0, 2.0, linear_mean)


def test_heun_linear_ode_endpoint():
    # exact solution x(t) = x_T sqrt(1 + t^2) / sqrt(1 + T^2)
    x = run_linear(1.0, 50)
    assert abs(x - 1.0 / np.sqrt(1 + 80.0**2)) <= 1e-3


def test_heun_second_order():
    exact = 1.0 / np.sqrt(1 + 80.0**2)
    errs = [abs(run_linear(1.0, n) - exact) for n in (25, 50, 100, 200)]
    ratios = [a / b for a, b in zip(errs, errs[1:])]
    assert all(3.5 < r < 4.6 for r in ratios)


def test_churn_gate_and_zero_churn():
    assert churn_gamma(1.0, 80.0, 0.05, 50.0, 50) == pytest.approx(np.sqrt(2) - 1)
    assert churn_gamma(1.0, 10.0, 0.05, 50.0, 50) == pytest.approx(0.2)
    assert churn_gamma(60.0, 80.0, 0.05, 50.0, 50) == 0.0
    x = np.array([0.5, 1.5])
    rng = np.random.default_rng(0)
    off = SamplerConfig(kind="heun-stoch", s_churn=0.0)
    np.testing.assert_array_equal(heun_stochastic_step(x, 2.0, 1.0, off, rng, linear_mean),
                                  heun_step(x, 2.0, 1.0, linear_mean))
    gated = SamplerConfig(kind="heun-stoch", s_tmin=5.0, s_tmax=10.0)
    np.testing.assert_array_equal(heun_stochastic_step(x, 2.0, 1.0, gated, rng, linear_mean),
                                  heun_step(x, 2.0, 1.0, linear_mean))


def gaussian_prior():
    C = np.array([[1.0, 0.4], [0.4, 0.5]])
    mu = np.array([0.7, -0.3])
    return mu, C, GmmDenoiser(GmmPrior.gaussian(mu, C))


def check_moments(samples, mu, C):
    n = samples.shape[0]
    z = np.abs(samples.mean(0) - mu) / np.sqrt(np.diag(C) / n)
    assert np.all(z <= 3.0)
    assert np.max(np.abs(np.cov(samples.T) - C)) / np.max(np.abs(C)) <= 0.05


def test_deterministic_heun_gaussian_moments():
    mu, C, den = gaussian_prior()
    cfg = SamplerConfig(sigma_max=500.0)
    x = 500.0 * np.random.default_rng(1).standard_normal((10_000, 2))
    check_moments(sample_heun(lambda z, t: den.mean(z, t), x, cfg).final, mu, C)


@pytest.mark.slow
def test_stochastic_heun_gaussian_moments():
    # 200 steps: at 50 steps the default churn inflates the covariance by about 6%
    mu, C, den = gaussian_prior()
    cfg = SamplerConfig(kind="heun-stoch", steps=200, sigma_max=500.0, seed=2)
    x = 500.0 * np.random.default_rng(3).standard_normal((10_000, 2))
    check_moments(sample_heun(lambda z, t: den.mean(z, t), x, cfg).final, mu, C)


def churn_variance(steps, s_churn=80.0, lam=1.0, sigma_max=80.0):
    """Exact output variance of stochastic Heun on a zero-mean scalar Gaussian prior."""
    cfg = SamplerConfig(kind="heun-stoch", steps=steps, s_churn=s_churn, sigma_max=sigma_max)
    grid = sigma_grid(cfg)
    var = sigma_max**2
    for a, b in zip(grid[:-1], grid[1:]):
        g = churn_gamma(a, s_churn, cfg.s_tmin, cfg.s_tmax, steps)
        a_hat = a * (1 + g)
        var += (a_hat**2 - a**2) * cfg.s_noise**2
        # the step is linear in x for a linear denoiser; read off its gain
        gain = heun_step(1.0, a_hat, b, lambda z, t: lam * z / (lam + t * t))
        var *= gain**2
    return var


def test_churn_bias_vanishes_with_more_steps():
    excess = [churn_variance(n) - 1.0 for n in (50, 100, 200, 400)]
    assert all(a > b > 0 for a, b in zip(excess, excess[1:]))
    assert excess[-1] < 0.01
    # without churn only the deterministic discretization error remains
    assert abs(churn_variance(100, s_churn=0.0) - 1.0) < 5e-3


def test_ddpm_zero_variance_step():
    sched = linear_betas(20)
    x, x0 = np.array([0.3, -1.0]), np.array([0.1, 0.2])
    rng_a, rng_b = np.random.default_rng(5), np.random.default_rng(5)
    out = ddpm_ancestral_step(x, 7, sched, x0, 0.0, rng_a)
    expected = ddpm_reverse_mean(x, x0, 7, sched) + np.sqrt(sched.beta_tilde(7)) * rng_b.standard_normal(2)
    np.testing.assert_array_equal(out, expected)
    np.testing.assert_array_equal(ddpm_ancestral_step(x, 1, sched, x0, 0.0, rng_a), ddpm_reverse_mean(x, x0, 1, sched))


def test_reverse_mean_matches_textbook_form():
    sched = linear_betas(30)
    x, x0 = np.array([0.4]), np.array([-0.2])
    t = 12
    ab_prev, ab, b = sched.alpha_bar(t - 1), sched.alpha_bar(t), sched.beta(t)
    ref = np.sqrt(ab_prev) * b / (1 - ab) * x0 + np.sqrt(1 - b) * (1 - ab_prev) / (1 - ab) * x
    np.testing.assert_allclose(ddpm_reverse_mean(x, x0, t, sched), ref, rtol=1e-12)


def test_converted_variance_step_identity():
    sched = linear_betas(50)
    r2 = np.array([0.3, 0.05])
    t = 25
    v2 = sched.beta_tilde(t) + sched.posterior_coef(t) ** 2 * r2
    back, _ = convert_reverse_variance(v2, t, sched)
    x, x0 = np.array([0.5, 0.5]), np.array([0.1, -0.1])
    a = ddpm_ancestral_step(x, t, sched, x0, back, np.random.default_rng(1))
    b = ddpm_ancestral_step(x, t, sched, x0, r2, np.random.default_rng(1))
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_ancestral_chain_gaussian_moments():
    lam = np.array([0.5, 2.0])
    den = GmmDenoiser(GmmPrior([1.0], [np.array([0.4, -0.6])], [lam]))
    sched = linear_betas(100, 1e-3, 0.2)

    def mean_fn(x, t):
        return den.mean(x, np.sqrt(sched.beta_bar(t) / sched.alpha_bar(t)), np.sqrt(sched.alpha_bar(t)))

    def var_fn(x, t):
        return den.posterior_variance(x, np.sqrt(sched.beta_bar(t) / sched.alpha_bar(t)), np.sqrt(sched.alpha_bar(t)))

    rng = np.random.default_rng(6)
    final = sample_ancestral(mean_fn, rng.standard_normal((10_000, 2)), sched, rng, var_fn).final
    check_moments(final, np.array([0.4, -0.6]), np.diag(lam))


def test_identity_ddnm_recovers_measurement():
    rng = np.random.default_rng(7)
    y = rng.uniform(-1, 1, (4, 4))
    meas = MeasurementModel(IdentityOp((4, 4)), 0.0, y)
    den = GmmDenoiser(GmmPrior([1.0], [[0.0]], [[0.25]]), (4, 4))
    traj = solve_inverse_problem(meas, den, GuidanceConfig(mode="ddnm"), SamplerConfig(steps=10))
    np.testing.assert_allclose(traj.final, y, atol=1e-6)


def conditional_setup():
    rng = np.random.default_rng(8)
    B = rng.standard_normal((4, 4))
    C = B @ B.T / 4 + 0.3 * np.eye(4)
    mu = rng.standard_normal(4)
    op = MaskOp(np.array([True, False, True, False]))
    y = np.array([0.5, -0.4])
    A = op.dense()
    gain = C @ A.T @ np.linalg.inv(A @ C @ A.T + 0.01 * np.eye(2))
    return GmmDenoiser(GmmPrior.gaussian(mu, C)), MeasurementModel(op, 0.1, y), mu + gain @ (y - A @ mu), C - gain @ A @ C


def test_type1_and_type2_agree_in_distribution():
    den, meas, m, P = conditional_setup()
    cfg = SamplerConfig(sigma_max=500.0, seed=3)
    a = solve_inverse_problem(meas, den, GuidanceConfig(mode="type1", covariance=ExactPosterior()), cfg,
                              batch=10_000).final
    b = solve_inverse_problem(meas, den, GuidanceConfig(mode="type2", covariance=ExactPosterior()), cfg,
                              batch=10_000).final
    se = np.sqrt(2 * np.diag(P) / 10_000)
    assert np.all(np.abs(a.mean(0) - b.mean(0)) <= 3 * se)
    check_moments(b, m, P)


def test_ancestral_solver_runs_and_records():
    den, meas, m, P = conditional_setup()
    cfg = SamplerConfig(kind="ancestral", schedule=linear_betas(100, 1e-3, 0.2), seed=4)
    traj = solve_inverse_problem(meas, den, GuidanceConfig(covariance=ExactPosterior()), cfg, batch=4000)
    assert len(traj.steps) == 100
    assert np.all(np.isfinite(traj.final))
    assert np.max(np.abs(traj.final.mean(0) - m)) < 0.1


def test_bit_reproducible():
    den, meas, _, _ = conditional_setup()
    cfg = SamplerConfig(kind="heun-stoch", steps=12, seed=9)
    a = solve_inverse_problem(meas, den, GuidanceConfig(), cfg, batch=5)
    b = solve_inverse_problem(meas, den, GuidanceConfig(), cfg, batch=5)
    assert a.final.tobytes() == b.final.tobytes()
    assert [s.residual for s in a.steps] == [s.residual for s in b.steps]


def test_streams_are_independent_of_churn():
    a = rng_streams(4)["init"].standard_normal(3)
    b = rng_streams(4)["init"].standard_normal(3)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, rng_streams(4)["churn"].standard_normal(3))


@pytest.mark.parametrize("kwargs", [
    dict(kind="euler"), dict(steps=0), dict(sigma_min=0.0), dict(sigma_min=100.0), dict(rho=0.0),
    dict(kind="ancestral"),
])
def test_config_validation(kwargs):
    with pytest.raises(ValidationError):
        SamplerConfig(**kwargs)
