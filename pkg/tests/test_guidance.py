import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from optcov import (
    CircularConvOp,
    DenseCovariance,
    DiagonalCovariance,
    DiagSpatial,
    ExactPosterior,
    FunctionDenoiser,
    GmmDenoiser,
    GmmPrior,
    GuidanceConfig,
    HaarBasis,
    IdentityOp,
    IsoDiffPIR,
    IsoPigdm,
    IsotropicCovariance,
    MaskOp,
    MeasurementModel,
    SuperResOp,
    TransformDiagonalCovariance,
    compute_v,
    conditional_mean,
    ddnm_solution,
    dense_v,
    dps_step_size,
    gaussian_joint_conditional_mean,
    proximal_solution_dense,
    select_covariance,
    type1_conditional_mean,
    type2_conditional_mean,
)
from optcov.errors import CapabilityError, SingularityError, ValidationError

SHAPE = (8, 8)


def operators(rng, shape=SHAPE):
    k = rng.uniform(size=(3, 3))
    return {
        "identity": IdentityOp(shape),
        "inpaint": MaskOp(rng.uniform(size=shape) < 0.5),
        "deblur": CircularConvOp(k / k.sum(), shape),
        "sr": SuperResOp(k / k.sum(), shape, 2),
    }


def reference_v(A, Sigma, noise, res):
    return A.T @ np.linalg.solve(noise**2 * np.eye(A.shape[0]) + A @ Sigma @ A.T, res)


def gaussian_setup(rng, d=6, m=4):
    B = rng.standard_normal((d, d))
    C = B @ B.T / d + 0.2 * np.eye(d)
    mu = rng.standard_normal(d)
    op = MaskOp(np.arange(d) < m)
    den = GmmDenoiser(GmmPrior.gaussian(mu, C))
    return mu, C, op, den


def test_mask_delta_limit():
    rng = np.random.default_rng(0)
    op = MaskOp(rng.uniform(size=SHAPE) < 0.5)
    D = rng.standard_normal(SHAPE)
    meas = MeasurementModel(op, 0.3, rng.standard_normal(op.out_shape))
    v, _ = compute_v(meas, D, IsotropicCovariance(0.0, SHAPE))
    np.testing.assert_allclose(v, (op.zero_fill(meas.y) - op.mask * D) / 0.09, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("task", ["identity", "inpaint", "deblur", "sr"])
def test_closed_form_matches_dense(task, seed):
    rng = np.random.default_rng(seed)
    op = operators(rng)[task]
    D = rng.standard_normal(SHAPE)
    meas = MeasurementModel(op, 0.1, rng.standard_normal(op.out_shape))
    r2 = rng.uniform(0.05, 1.0)
    v, stats = compute_v(meas, D, IsotropicCovariance(r2, SHAPE), method="closed")
    assert stats.method == "closed-form"
    ref = reference_v(op.dense(), r2 * np.eye(64), 0.1, meas.residual(D).reshape(-1))
    np.testing.assert_allclose(v.reshape(-1), ref, atol=1e-8)


@pytest.mark.parametrize("task", ["inpaint", "deblur", "sr"])
def test_cg_diagonal_and_transform_match_dense(task):
    rng = np.random.default_rng(1)
    op = operators(rng)[task]
    D = rng.standard_normal(SHAPE)
    meas = MeasurementModel(op, 0.1, rng.standard_normal(op.out_shape))
    r2 = rng.uniform(0.05, 1.0, SHAPE)
    for cov in (DiagonalCovariance(r2, SHAPE), TransformDiagonalCovariance(HaarBasis(SHAPE, 2), r2, SHAPE)):
        v, stats = compute_v(meas, D, cov)
        assert stats.method == "cg" and stats.iterations > 0
        ref = reference_v(op.dense(), cov.dense(), 0.1, meas.residual(D).reshape(-1))
        assert np.linalg.norm(v.reshape(-1) - ref) <= 1e-3 * np.linalg.norm(ref)


def test_dense_path_and_batches():
    rng = np.random.default_rng(2)
    op = operators(rng)["deblur"]
    D = rng.standard_normal((3,) + SHAPE)
    meas = MeasurementModel(op, 0.2, rng.standard_normal((3,) + op.out_shape))
    cov = IsotropicCovariance(np.array([0.1, 0.5, 1.0]), SHAPE)
    closed, _ = compute_v(meas, D, cov)
    np.testing.assert_allclose(closed, dense_v(meas, D, cov), atol=1e-10)
    cg, _ = compute_v(meas, D, cov, method="cg")
    assert np.linalg.norm(cg - closed) <= 1e-3 * np.linalg.norm(closed)


def test_closed_requires_isotropic():
    rng = np.random.default_rng(3)
    op = operators(rng)["deblur"]
    meas = MeasurementModel(op, 0.1, np.zeros(SHAPE))
    with pytest.raises(CapabilityError):
        compute_v(meas, np.zeros(SHAPE), DiagonalCovariance(np.ones(SHAPE), SHAPE), method="closed")
    with pytest.raises(ValidationError):
        compute_v(meas, np.zeros(SHAPE), DiagonalCovariance(np.ones(SHAPE), SHAPE), method="magic")


def test_noiseless_zero_covariance_rejected():
    op = IdentityOp((4,))
    meas = MeasurementModel(op, 0.0, np.ones(4))
    with pytest.raises(SingularityError):
        compute_v(meas, np.zeros(4), IsotropicCovariance(0.0, (4,)))


@pytest.mark.parametrize("seed", range(3))
def test_type1_exact_on_gaussian(seed):
    rng = np.random.default_rng(seed)
    mu, C, op, den = gaussian_setup(rng)
    cfg = GuidanceConfig(mode="type1", covariance=ExactPosterior())
    for s, sigma in [(1.0, 0.5), (0.7, 2.0)]:
        x, y = rng.standard_normal(6), rng.standard_normal(4)
        meas = MeasurementModel(op, 0.3, y)
        out = type1_conditional_mean(x, den, meas, cfg, s, sigma).x0
        ref = gaussian_joint_conditional_mean(mu, C, x, s, sigma, op.dense(), y, 0.3)
        np.testing.assert_allclose(out, ref, atol=1e-8)
        out2 = type2_conditional_mean(x, den, meas, GuidanceConfig(covariance=ExactPosterior()), s, sigma).x0
        np.testing.assert_allclose(out2, ref, atol=1e-8)


def test_zero_residual_returns_denoiser_output():
    rng = np.random.default_rng(4)
    _, _, op, den = gaussian_setup(rng)
    x = rng.standard_normal(6)
    D = den.mean(x, 0.8)
    meas = MeasurementModel(op, 0.1, op.apply(D))
    for mode in ("type1", "type2"):
        out = conditional_mean(x, den, meas, GuidanceConfig(mode=mode), 1.0, 0.8)
        np.testing.assert_allclose(out.x0, D, atol=1e-14)


def test_type2_inpainting_formula_and_proximal_problem():
    rng = np.random.default_rng(5)
    op = MaskOp(rng.uniform(size=SHAPE) < 0.5)
    D = rng.standard_normal(SHAPE)
    den = FunctionDenoiser(lambda x, sigma, scale: D, SHAPE)
    meas = MeasurementModel(op, 0.2, rng.standard_normal(op.out_shape))
    sigma = 0.9
    r2 = sigma**2 / (1 + sigma**2)
    out = type2_conditional_mean(np.zeros(SHAPE), den, meas, GuidanceConfig(), 1.0, sigma).x0
    expected = D + op.mask * r2 * (op.zero_fill(meas.y) - op.mask * D) / (0.04 + r2)
    np.testing.assert_allclose(out, expected, atol=1e-12)
    ref = proximal_solution_dense(D.reshape(-1), meas.y, op.dense(), r2 * np.eye(64), 0.2)
    np.testing.assert_allclose(out.reshape(-1), ref, atol=1e-10)


@pytest.mark.parametrize("seed", range(20))
def test_woodbury_forms_agree(seed):
    rng = np.random.default_rng(seed)
    d, m = rng.integers(2, 33), rng.integers(1, 33)
    A = rng.standard_normal((m, d))
    B = rng.standard_normal((d, d))
    Sigma = B @ B.T / d + 0.1 * np.eye(d)
    D, y = rng.standard_normal(d), rng.standard_normal(m)
    eq46 = D + Sigma @ reference_v(A, Sigma, 0.5, y - A @ D)
    np.testing.assert_allclose(proximal_solution_dense(D, y, A, Sigma, 0.5), eq46, atol=1e-8)


def test_small_variance_returns_denoiser_output():
    rng = np.random.default_rng(6)
    op = operators(rng)["deblur"]
    D = rng.standard_normal(SHAPE)
    den = FunctionDenoiser(lambda x, sigma, scale: D, SHAPE)
    meas = MeasurementModel(op, 0.1, rng.standard_normal(SHAPE))
    out = type2_conditional_mean(np.zeros(SHAPE), den, meas, GuidanceConfig(covariance=IsoDiffPIR(1e12)), 1.0, 1.0)
    np.testing.assert_allclose(out.x0, D, atol=1e-8)


def test_ddnm_mask_noiseless():
    rng = np.random.default_rng(7)
    op = MaskOp(rng.uniform(size=SHAPE) < 0.5)
    x_true, D = rng.standard_normal(SHAPE), rng.standard_normal(SHAPE)
    out = ddnm_solution(D, MeasurementModel(op, 0.0, op.apply(x_true)))
    np.testing.assert_array_equal(out[op.mask], x_true[op.mask])
    np.testing.assert_array_equal(out[~op.mask], D[~op.mask])


def test_ddnm_invertible_deblur_ignores_denoiser():
    k = np.array([[0.0, 0.1, 0.0], [0.1, 0.6, 0.1], [0.0, 0.1, 0.0]])
    op = CircularConvOp(k, SHAPE)
    rng = np.random.default_rng(8)
    meas = MeasurementModel(op, 0.0, rng.standard_normal(SHAPE))
    a = ddnm_solution(rng.standard_normal(SHAPE), meas)
    b = ddnm_solution(rng.standard_normal(SHAPE), meas)
    np.testing.assert_allclose(a, b, atol=1e-10)
    np.testing.assert_allclose(a, op.pseudo_inverse(meas.y), atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_ddnm_measurement_consistency(seed):
    rng = np.random.default_rng(seed)
    mask = rng.uniform(size=(6, 6)) < 0.5
    mask[0, 0] = True
    op = MaskOp(mask)
    meas = MeasurementModel(op, 0.0, rng.standard_normal(op.out_shape))
    np.testing.assert_array_equal(op.apply(ddnm_solution(rng.standard_normal((6, 6)), meas)), meas.y)


def test_ddnm_limit_mask():
    rng = np.random.default_rng(9)
    shape = (32, 32)
    op = MaskOp(rng.uniform(size=shape) < 0.5)
    D = rng.uniform(-1, 1, shape)
    den = FunctionDenoiser(lambda x, sigma, scale: D, shape)
    y = op.apply(rng.uniform(-1, 1, shape))
    errs = []
    for noise in (1e-2, 1e-3, 1e-4):
        meas = MeasurementModel(op, noise, y)
        x0 = type2_conditional_mean(np.zeros(shape), den, meas, GuidanceConfig(), 1.0, 1.0).x0
        errs.append(np.mean(np.abs(x0 - ddnm_solution(D, meas))))
    assert errs[0] > errs[1] > errs[2] and errs[2] < 1e-6


def test_select_covariance():
    cfg = GuidanceConfig(covariance=DiagSpatial(r2=np.ones(2)), switch_sigma=0.2)
    assert select_covariance(cfg, 0.1) is cfg.covariance
    assert isinstance(select_covariance(cfg, 5.0), IsoPigdm)
    cfg = GuidanceConfig(covariance=DiagSpatial(r2=np.ones(2)), switch_sigma=np.inf)
    assert select_covariance(cfg, 1e6) is cfg.covariance


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-3, 1e3), st.floats(0.01, 10.0))
def test_dps_step_invariance(scale, zeta):
    rng = np.random.default_rng(0)
    res = rng.standard_normal((2, 5))
    step = dps_step_size(zeta, res, 1)
    np.testing.assert_allclose(step * np.linalg.norm(res, axis=-1), zeta, rtol=1e-12)
    scaled = dps_step_size(zeta, scale * res, 1)[:, None] * scale * res
    np.testing.assert_allclose(scaled, step[:, None] * res, rtol=1e-10)


def test_dps_drift_matches_formula():
    rng = np.random.default_rng(10)
    mu, C, op, den = gaussian_setup(rng)
    x, y = rng.standard_normal(6), rng.standard_normal(4)
    meas = MeasurementModel(op, 0.1, y)
    sigma = 0.6
    out = type1_conditional_mean(x, den, meas, GuidanceConfig(mode="type1", dps_zeta=0.4), 1.0, sigma)
    D = den.mean(x, sigma)
    res = y - op.apply(D)
    J = den.posterior_covariance(x, sigma) / sigma**2  # Jacobian of the Gaussian posterior mean
    expected = D + sigma**2 * J.T @ (2 * 0.4 / np.linalg.norm(res) * op.adjoint(res))
    np.testing.assert_allclose(out.x0, expected, atol=1e-10)
    assert np.linalg.norm(y - op.apply(out.x0)) < np.linalg.norm(res)
    with pytest.raises(SingularityError):
        type1_conditional_mean(x, den, MeasurementModel(op, 0.1, op.apply(D)),
                               GuidanceConfig(mode="type1", dps_zeta=0.4), 1.0, sigma)


def test_adaptive_weight_scales_drift():
    rng = np.random.default_rng(11)
    _, _, op, den = gaussian_setup(rng)
    x = rng.standard_normal(6)
    meas = MeasurementModel(op, 0.1, rng.standard_normal(4))
    sigma = 1.5
    plain = type1_conditional_mean(x, den, meas, GuidanceConfig(mode="type1"), 1.0, sigma).x0
    weighted = type1_conditional_mean(x, den, meas, GuidanceConfig(mode="type1", adaptive_weight=True),
                                      1.0, sigma).x0
    D = den.mean(x, sigma)
    np.testing.assert_allclose(weighted - D, sigma**2 / (1 + sigma**2) * (plain - D), atol=1e-12)


def test_type1_requires_vjp_and_config_validation():
    den = FunctionDenoiser(lambda x, sigma, scale: x, (4,))
    meas = MeasurementModel(IdentityOp((4,)), 0.1, np.ones(4))
    with pytest.raises(CapabilityError):
        type1_conditional_mean(np.zeros(4), den, meas, GuidanceConfig(mode="type1"), 1.0, 1.0)
    with pytest.raises(ValidationError):
        GuidanceConfig(mode="type3")
    with pytest.raises(ValidationError):
        GuidanceConfig(mode="type2", dps_zeta=1.0)
    with pytest.raises(ValidationError):
        GuidanceConfig(switch_sigma=-1.0)


def test_dense_covariance_item_in_batched_solve():
    rng = np.random.default_rng(12)
    mu, C, op, den = gaussian_setup(rng)
    x = rng.standard_normal((3, 6))
    meas = MeasurementModel(op, 0.2, rng.standard_normal((3, 4)))
    cov = DenseCovariance(den.posterior_covariance(x, 0.7), (6,))
    v, _ = compute_v(meas, den.mean(x, 0.7), cov)
    np.testing.assert_allclose(v, dense_v(meas, den.mean(x, 0.7), cov), rtol=1e-3, atol=1e-8)
