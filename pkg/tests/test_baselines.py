import warnings

import numpy as np
import pytest

from perceptdist.baselines import (
    LaplacianPyramid,
    NlapdGdnModel,
    SsimParams,
    l2,
    mse,
    msssim,
    msssim_scales,
    nlapd_distance,
    psnr,
    ssim,
    to_luminance,
)
from perceptdist.synthetic import smooth_images
from perceptdist.tensor import Tensor, backward

from oracles import plain_pyramid_rmse, pyramid_oracle


# mse / psnr -------------------------------------------------------------------


def test_mse_psnr_examples(rng):
    a = rng.random((3, 16, 16))
    assert mse(a, a) == 0.0
    assert psnr(a, a) == float("inf")
    b = a + 0.1
    assert mse(a, b) == pytest.approx(0.01, rel=1e-12)
    assert psnr(a, b) == pytest.approx(20.0, rel=1e-10)
    c = np.zeros((1, 10, 10))
    d = c.copy()
    d[0, 3, 4] = 1.0
    assert mse(c, d) == pytest.approx(1 / 100)
    assert l2(c, d) == 1.0
    with pytest.raises(ValueError, match="shape"):
        mse(c, np.zeros((1, 10, 11)))


# ssim -------------------------------------------------------------------------


def test_ssim_window():
    p = SsimParams()
    assert p.window().shape == (11, 11)
    assert p.window().sum() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        SsimParams(k1=0)


def test_ssim_examples():
    img = smooth_images(1, 32, seed=2)[0]
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)
    checker = (np.indices((32, 32)).sum(axis=0) % 2).astype(float)
    assert ssim(checker, 1 - checker) < 0
    const = np.full((16, 16), 0.5)
    assert ssim(const, const) == 1.0


def test_ssim_matches_direct_window_evaluation(rng):
    a, b = rng.random((13, 12)), rng.random((13, 12))
    p = SsimParams()
    win = p.window()
    c1, c2 = (0.01) ** 2, (0.03) ** 2
    vals = []
    for r in range(13 - 10):
        for c in range(12 - 10):
            pa, pb = a[r:r + 11, c:c + 11], b[r:r + 11, c:c + 11]
            ma, mb = (win * pa).sum(), (win * pb).sum()
            va = (win * (pa - ma) ** 2).sum()
            vb = (win * (pb - mb) ** 2).sum()
            cov = (win * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    assert ssim(a, b) == pytest.approx(np.mean(vals), abs=1e-10)


def test_ssim_symmetry_and_range(rng):
    for _ in range(5):
        a, b = rng.random((3, 20, 20)), rng.random((3, 20, 20))
        s = ssim(a, b)
        assert abs(s - ssim(b, a)) < 1e-7
        assert -1 <= s <= 1


def test_ssim_too_small():
    with pytest.raises(ValueError, match="smaller"):
        ssim(np.zeros((10, 20)), np.zeros((10, 20)))


def test_luminance():
    x = np.stack([np.ones((2, 2)), np.zeros((2, 2)), np.zeros((2, 2))])
    np.testing.assert_allclose(to_luminance(x), 0.299)


# ms-ssim ----------------------------------------------------------------------


def test_msssim_identity_and_scales():
    img = smooth_images(1, 176, seed=5)[0]
    assert msssim_scales((176, 176)) == 5
    assert msssim_scales((175, 200)) == 4
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert msssim(img, img) == pytest.approx(1.0, abs=1e-12)


def test_msssim_monotone_in_noise():
    img = smooth_images(1, 176, seed=6)[0]
    noise = np.random.default_rng(0).standard_normal(img.shape)
    vals = [msssim(img, img + eps * noise) for eps in (0.01, 0.05, 0.1)]
    assert vals[0] > vals[1] > vals[2]


def test_msssim_reduces_scales_with_warning():
    img = smooth_images(1, 64, seed=1)[0]
    with pytest.warns(UserWarning, match="using 3"):
        assert msssim(img, img) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        msssim(np.zeros((8, 8)), np.zeros((8, 8)))


# laplacian pyramid / nlapd ------------------------------------------------------


def test_pyramid_reconstruction(rng):
    for shape in [(64, 64), (37, 50), (3, 33, 17)]:
        x = rng.random(shape)
        pyr = LaplacianPyramid.build(x, 4)
        assert np.max(np.abs(pyr.collapse() - x)) < 1e-4


def test_pyramid_matches_oracle(rng):
    x = rng.random((64, 64))
    ours = LaplacianPyramid.build(x, 6).coefficients()
    ref = pyramid_oracle(x, 6)
    assert len(ours) == 7
    for a, b in zip(ours, ref):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_nlapd_identity_equals_pyramid_rmse(rng):
    a = smooth_images(1, 64, seed=8)[0]
    b = np.clip(a + 0.05 * rng.standard_normal(a.shape), 0, 1).astype(np.float32)
    expect = plain_pyramid_rmse(to_luminance(a), to_luminance(b))
    assert nlapd_distance(NlapdGdnModel.identity(), a, b) == pytest.approx(expect, abs=1e-6)


def test_nlapd_zero_and_symmetry(rng):
    model = NlapdGdnModel(seed=0)
    a = smooth_images(1, 64, seed=9)[0]
    b = rng.random(a.shape)
    assert nlapd_distance(model, a, a) == 0.0
    assert nlapd_distance(model, a, b) == nlapd_distance(model, b, a)
    assert nlapd_distance(model, a, b) > 0


def test_nlapd_is_differentiable_in_gdn_params(rng):
    model = NlapdGdnModel()
    a = rng.random((3, 3, 32, 32))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    from perceptdist.tensor import tsum
    with pytest.warns(UserWarning):
        backward(tsum(model.pair_distance(Tensor(a), Tensor(b))))
    grads = [p.grad for p in model.parameters().values()]
    assert all(g is not None and np.all(np.isfinite(g)) for g in grads)
    assert any(np.any(g != 0) for g in grads)
