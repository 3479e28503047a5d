import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from optcov import mad, metric_report, psnr, report_csv, report_table, ssim
from optcov.errors import DimensionError


def reference_ssim(x, ref, peak):
    kw = dict(gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=peak)
    if x.ndim == 3:
        return structural_similarity(x, ref, channel_axis=-1, **kw)
    return structural_similarity(x, ref, **kw)


def test_mad_examples():
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal(16), rng.standard_normal(16)
    assert mad(x, x) == 0.0
    assert mad(x + 0.3, x) == pytest.approx(0.3)
    assert mad(x, y) == pytest.approx(sum(abs(a - b) for a, b in zip(x, y)) / 16, rel=1e-14)


def test_psnr_examples():
    x = np.zeros((4, 4))
    assert psnr(x, x) == np.inf
    assert psnr(x + 2.0, x, peak=2.0) == pytest.approx(0.0, abs=1e-12)
    assert psnr(x + 0.2, x, peak=2.0) == pytest.approx(20.0, abs=1e-10)


def test_ssim_identity_and_noise():
    rng = np.random.default_rng(1)
    ref = rng.uniform(-1, 1, (32, 32))
    assert ssim(ref, ref) == pytest.approx(1.0)
    noisy = ref + rng.uniform(-2, 2, ref.shape)
    assert ssim(noisy, ref) < 0.5


@pytest.mark.parametrize("shape", [(24, 24), (16, 20, 3)])
@pytest.mark.parametrize("seed", range(3))
def test_ssim_matches_scikit_image(shape, seed):
    rng = np.random.default_rng(seed)
    ref = np.clip(rng.normal(0, 0.4, shape), -1, 1)
    x = np.clip(ref + rng.normal(0, 0.2, shape), -1, 1)
    assert ssim(x, ref, peak=2.0) == pytest.approx(reference_ssim(x, ref, 2.0), abs=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_ssim_scale_invariance(seed, scale):
    # scaling both images and the peak together leaves SSIM unchanged
    rng = np.random.default_rng(seed)
    ref = rng.uniform(-1, 1, (16, 16))
    x = ref + rng.normal(0, 0.3, ref.shape)
    assert ssim(scale * x, scale * ref, peak=2.0 * scale) == pytest.approx(ssim(x, ref, peak=2.0), abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_symmetry(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-1, 1, (12, 12)), rng.uniform(-1, 1, (12, 12))
    assert mad(a, b) == mad(b, a)
    assert psnr(a, b) == psnr(b, a)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        mad(np.zeros(3), np.zeros(4))


def test_report_formats():
    rng = np.random.default_rng(2)
    refs = [rng.uniform(-1, 1, (16, 16)) for _ in range(2)]
    imgs = [r + 0.1 for r in refs]
    report = metric_report(imgs, refs, names=["a", "b"])
    assert report["aggregate"]["mad"] == pytest.approx(0.1)
    lines = report_csv(report).strip().splitlines()
    assert lines[0] == "metric,image,value"
    assert len(lines) == 1 + 3 * 3
    assert "mean" in report_table(report)
