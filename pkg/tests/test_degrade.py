import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from faig import degrade as dg


def test_gaussian_kernel_matches_direct_evaluation():
    sigma, size = 2.0, 21
    k = dg.gaussian_kernel(sigma, size)
    r = np.arange(size) - size // 2
    ii, jj = np.meshgrid(r, r, indexing="ij")
    direct = np.exp(-(ii ** 2 + jj ** 2) / (2 * sigma ** 2))
    direct /= direct.sum()
    np.testing.assert_allclose(k, direct, rtol=0, atol=1e-15)
    assert k.shape == (21, 21)
    assert k[10, 10] == k.max()
    np.testing.assert_allclose(k, k.T, atol=0)
    np.testing.assert_allclose(k, k[::-1, ::-1], atol=0)


def test_gaussian_kernel_delta_limit():
    k = dg.gaussian_kernel(1e-6, 3)
    assert k[1, 1] > 1 - 1e-6


@pytest.mark.parametrize("sigma, size", [(2.0, 20), (2.0, 0), (0.0, 21), (-1.0, 21)])
def test_gaussian_kernel_rejects_bad_arguments(sigma, size):
    with pytest.raises(ValueError):
        dg.gaussian_kernel(sigma, size)


@settings(max_examples=50, deadline=None)
@given(sigma=st.floats(0.05, 6.0), half=st.integers(0, 15))
def test_gaussian_kernel_sums_to_one(sigma, half):
    k = dg.gaussian_kernel(sigma, 2 * half + 1)
    assert abs(k.sum() - 1.0) < 1e-9
    assert (k >= 0).all()


def test_blur_equals_2d_kernel_correlation():
    rng = np.random.default_rng(0)
    img = rng.random((3, 40, 33))
    k = dg.gaussian_kernel(2.0, 21)
    direct = np.stack([ndimage.correlate(c, k, mode="reflect") for c in img])
    np.testing.assert_allclose(dg.blur(img, 2.0, 21), direct, atol=1e-12)


def test_downsample_constant_and_identity():
    img = np.full((3, 16, 24), 0.37)
    np.testing.assert_allclose(dg.downsample_bicubic(img, 2), 0.37, atol=1e-12)
    assert dg.downsample_bicubic(img, 2).shape == (3, 8, 12)
    rng = np.random.default_rng(1)
    x = rng.random((3, 10, 10))
    np.testing.assert_array_equal(dg.downsample_bicubic(x, 1), x)


def test_downsample_linear_ramp_interior():
    # analytic oracle: output pixel j samples the ramp at input position 2j + 0.5
    slope = 0.01
    w = 64
    img = np.broadcast_to(slope * np.arange(w, dtype=np.float64), (3, 32, w)).copy()
    out = dg.downsample_bicubic(img, 2)
    j = np.arange(w // 2)
    expected = slope * (2 * j + 0.5)
    interior = slice(3, w // 2 - 3)
    np.testing.assert_allclose(out[:, :, interior], np.broadcast_to(expected[interior], out[:, :, interior].shape),
                               atol=1e-6)
    # doubled slope per output pixel
    np.testing.assert_allclose(np.diff(out[0, 5, interior]), 2 * slope, atol=1e-6)


def test_downsample_rejects_indivisible():
    with pytest.raises(ValueError):
        dg.downsample_bicubic(np.zeros((3, 15, 16)), 2)


@settings(max_examples=25, deadline=None)
@given(c=st.floats(-2, 2), seed=st.integers(0, 1000))
def test_downsample_commutes_with_offset(c, seed):
    img = np.random.default_rng(seed).random((3, 12, 20))
    np.testing.assert_allclose(dg.downsample_bicubic(img + c, 2), dg.downsample_bicubic(img, 2) + c, atol=1e-6)


def test_degrade_identity():
    rng = np.random.default_rng(0)
    hr = rng.random((3, 20, 20)).astype(np.float32)
    s = dg.degrade(hr, dg.DegradationSpec(scale=1), rng)
    np.testing.assert_array_equal(s.lr, hr)


def test_degrade_noise_statistics():
    # sample-statistics oracle on a mid-gray image, > 10^6 pixels
    hr = np.full((3, 600, 600), 0.5, dtype=np.float32)
    s = dg.degrade(hr, dg.DegradationSpec(use_noise=True, noise_sigma=0.1, scale=1), np.random.default_rng(3))
    std = float(np.std(s.lr.astype(np.float64) - hr))
    assert 0.095 <= std <= 0.105


def test_degrade_constant_preserved_by_blur_and_downsampling():
    hr = np.full((3, 32, 32), 0.6, dtype=np.float32)
    s = dg.degrade(hr, dg.spec_for("blur"), np.random.default_rng(0))
    np.testing.assert_allclose(s.lr, 0.6, atol=1e-6)
    assert s.lr.shape == (3, 16, 16)


def test_degrade_pipeline_order_blur_then_down_then_noise():
    rng_img = np.random.default_rng(5)
    hr = rng_img.random((3, 32, 32)).astype(np.float32)
    spec = dg.spec_for("blur+noise")
    s = dg.degrade(hr, spec, np.random.default_rng(9))
    noise = np.random.default_rng(9).normal(0, 0.1, size=(3, 16, 16))
    expected = np.clip(dg.downsample_bicubic(dg.blur(hr.astype(np.float64), 2.0, 21), 2) + noise, 0, 1)
    np.testing.assert_array_equal(s.lr, expected.astype(np.float32))


def test_degrade_rejects_indivisible():
    with pytest.raises(ValueError):
        dg.degrade(np.zeros((3, 15, 16)), dg.DegradationSpec(scale=2), np.random.default_rng(0))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), tag=st.sampled_from(["clean", "blur", "noise", "blur+noise"]))
def test_degrade_deterministic_and_in_range(seed, tag):
    hr = dg.procedural_image(np.random.default_rng(seed), 32)
    a = dg.degrade(hr, dg.spec_for(tag), np.random.default_rng(seed))
    b = dg.degrade(hr, dg.spec_for(tag), np.random.default_rng(seed))
    np.testing.assert_array_equal(a.lr, b.lr)
    assert a.lr.min() >= 0 and a.lr.max() <= 1
    assert a.hr.shape[1:] == (2 * a.lr.shape[1], 2 * a.lr.shape[2])


def test_spec_invariants():
    with pytest.raises(ValueError):
        dg.DegradationSpec(use_blur=True, blur_sigma=2.0, kernel_size=5)
    with pytest.raises(ValueError):
        dg.DegradationSpec(noise_sigma=-0.1)
    with pytest.raises(ValueError):
        dg.DegradationSpec(scale=0)


def test_bicubic_policy_never_degrades():
    ds = dg.procedural_dataset(3, 32, seed=0)
    batch = dg.sample_training_batch(ds, "bicubic", np.random.default_rng(0), batch_size=50, patch_size=16)
    assert all(not s.spec.use_blur and not s.spec.use_noise for s in batch)


def test_blind_policy_frequencies():
    # frequency oracle over 10^4 draws
    ds = dg.procedural_dataset(2, 16, seed=0)
    batch = dg.sample_training_batch(ds, "blind", np.random.default_rng(42), batch_size=10_000, patch_size=8)
    blur = np.array([s.spec.use_blur for s in batch])
    noise = np.array([s.spec.use_noise for s in batch])
    assert 0.47 <= blur.mean() <= 0.53
    assert 0.47 <= noise.mean() <= 0.53
    assert abs((blur & noise).mean() - blur.mean() * noise.mean()) < 0.02


def test_patch_sizes():
    ds = dg.procedural_dataset(2, 160, seed=0)
    batch = dg.sample_training_batch(ds, "blind", np.random.default_rng(0), batch_size=4, patch_size=128)
    assert all(s.lr.shape == (3, 64, 64) and s.hr.shape == (3, 128, 128) for s in batch)


def test_small_images_skipped_and_empty_dataset_rejected(caplog):
    ds = [np.zeros((3, 8, 8), np.float32), np.zeros((3, 32, 32), np.float32)]
    batch = dg.sample_training_batch(ds, "bicubic", np.random.default_rng(0), batch_size=2, patch_size=16)
    assert len(batch) == 2
    assert "skipping 1" in caplog.text
    with pytest.raises(ValueError):
        dg.sample_training_batch(ds[:1], "bicubic", np.random.default_rng(0), batch_size=2, patch_size=16)


def test_png_and_manifest_roundtrip(tmp_path):
    img = dg.procedural_image(np.random.default_rng(0), 24)
    dg.write_png(tmp_path / "a.png", img)
    dg.write_manifest(tmp_path / "list.txt", ["a.png"])
    loaded = dg.load_dataset(tmp_path / "list.txt")
    assert len(loaded) == 1
    np.testing.assert_allclose(loaded[0], img, atol=0.5 / 255 + 1e-7)
    assert loaded[0].dtype == np.float32
