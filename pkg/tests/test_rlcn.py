"""RLCN guide: oracle equivalence, rectification and scale covariance."""

import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from ecnet.rlcn import RlcnParams, compute_rlcn, local_mean_std

import oracles


def test_constant_image():
    img = np.full((12, 12, 3), 0.37)
    mean, std = local_mean_std(img, 9)
    np.testing.assert_allclose(mean, 0.37, atol=1e-15)
    assert np.all(std == 0)
    assert np.all(compute_rlcn(img) == 0)


def test_center_mean_of_ramp():
    img = (np.arange(9.0) / 8).reshape(3, 3, 1)
    mean, _ = local_mean_std(img, 3)
    assert mean[1, 1, 0] == pytest.approx(0.5, abs=1e-15)


def test_local_stats_match_loop_oracle():
    img = np.random.default_rng(0).random((16, 16, 3))
    mean, std = local_mean_std(img, 5)
    m_ref, s_ref = oracles.local_mean_std(img, 5)
    assert np.abs(mean - m_ref).max() < 1e-6
    assert np.abs(std - s_ref).max() < 1e-6


def test_single_bright_pixel():
    img = np.zeros((5, 5, 1))
    img[2, 2] = 1.0
    out = compute_rlcn(img, RlcnParams(window=3, epsilon=1e-4))
    expected = (1 - 1 / 9) / (np.sqrt(8) / 9 + 1e-4)
    assert out[2, 2, 0] == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(2.824, abs=5e-3)  # quoted to about three digits


def test_darker_pixels_rectified():
    img = np.full((9, 9, 3), 0.6)
    img[4, 4] = 0.1
    out = compute_rlcn(img, RlcnParams(window=3))
    assert out[4, 4].max() == 0


def test_dtype_and_shape_preserved():
    img = np.random.default_rng(1).random((10, 12, 3)).astype(np.float32)
    out = compute_rlcn(img)
    assert out.shape == img.shape and out.dtype == np.float32


def test_rejections():
    with pytest.raises(ValueError):
        RlcnParams(window=4)
    with pytest.raises(ValueError):
        RlcnParams(window=1)
    with pytest.raises(ValueError):
        local_mean_std(np.zeros((3, 3, 1)), 9)
    bad = np.zeros((8, 8, 3))
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        compute_rlcn(bad)


def test_oracle_equivalence_100_images():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        img = rng.random((32, 32, 3))
        worst = max(worst, np.abs(compute_rlcn(img) - oracles.rlcn(img, 9, 1e-4)).max())
    assert worst < 1e-6


images = hnp.arrays(np.float64, st.tuples(st.integers(6, 14), st.integers(6, 14), st.just(3)),
                    elements=st.floats(0, 1))


@settings(max_examples=40, deadline=None)
@given(images, st.sampled_from([3, 5, 7]))
def test_nonnegative_and_rectification(img, window):
    out = compute_rlcn(img, RlcnParams(window=window))
    assert np.all(out >= 0)
    mean, _ = local_mean_std(img, window)
    above = img - mean
    # away from the rounding band the sign of I - mean decides positivity
    clear = np.abs(above) > 1e-9
    np.testing.assert_array_equal((out > 0)[clear], (above > 0)[clear])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_scale_covariance(seed, alpha):
    img = 0.1 + 0.8 * np.random.default_rng(seed).random((12, 12, 3))
    np.testing.assert_allclose(compute_rlcn(alpha * img, RlcnParams(5, 0.0)),
                               compute_rlcn(img, RlcnParams(5, 0.0)), rtol=1e-7, atol=1e-9)
    np.testing.assert_allclose(compute_rlcn(alpha * img, RlcnParams(5, 1e-3)),
                               compute_rlcn(img, RlcnParams(5, 1e-3 / alpha)), rtol=1e-7, atol=1e-9)


def test_cost_independent_of_window():
    img = np.random.default_rng(3).random((256, 256, 3))

    def best(window):
        times = []
        for _ in range(5):
            t0 = time.perf_counter()
            compute_rlcn(img, RlcnParams(window=window))
            times.append(time.perf_counter() - t0)
        return min(times)

    small, large = best(3), best(63)
    assert large < 2.0 * small
