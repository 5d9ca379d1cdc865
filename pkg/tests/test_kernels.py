import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from srrm.kernels import (KernelSpec, gaussian_kernel, kde_pdf, kernel_matrix, median_distance,
                          silverman_bandwidth)

vec3 = arrays(np.float64, 3, elements=st.floats(-10, 10))
sigmas = st.floats(0.05, 20)


class TestGaussianKernel:
    @given(vec3, sigmas)
    def test_self_similarity_is_one(self, x, s):
        assert gaussian_kernel(x, x, s) == 1.0

    def test_half_value_distance(self):
        s = 1.7
        x = np.zeros(2)
        y = np.array([math.sqrt(2 * s * s * math.log(2)), 0.0])
        assert gaussian_kernel(x, y, s) == pytest.approx(0.5, abs=1e-12)

    @given(vec3, vec3, sigmas)
    def test_symmetric_and_bounded(self, x, y, s):
        k = gaussian_kernel(x, y, s)
        assert k == gaussian_kernel(y, x, s)
        assert 0.0 <= k <= 1.0

    @given(st.floats(0.0, 5.0), st.floats(0.01, 5.0), sigmas)
    def test_strictly_decreasing_in_distance(self, r, dr, s):
        near = gaussian_kernel([0.0], [r], s)
        far = gaussian_kernel([0.0], [r + dr], s)
        assert far < near or near == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            gaussian_kernel([0, 1], [0, 1, 2], 1.0)

    @pytest.mark.parametrize("s", [0.0, -1.0, float("nan")])
    def test_bad_sigma(self, s):
        with pytest.raises(ValueError):
            gaussian_kernel([0], [1], s)
        with pytest.raises(ValueError):
            KernelSpec(s)


class TestKernelMatrix:
    def test_single_row(self):
        np.testing.assert_array_equal(kernel_matrix(np.array([[3.0, 4.0]]), 2.0), [[1.0]])

    def test_identical_rows(self):
        np.testing.assert_array_equal(kernel_matrix(np.ones((2, 3)), 0.5), np.ones((2, 2)))

    def test_matches_pairwise_loop(self):
        X = np.random.default_rng(1).normal(size=(5, 3))
        K = kernel_matrix(X, 0.8)
        for i in range(5):
            for j in range(5):
                assert K[i, j] == pytest.approx(gaussian_kernel(X[i], X[j], 0.8), abs=1e-12)

    @given(arrays(np.float64, (10, 2), elements=st.floats(-5, 5)), sigmas)
    @settings(max_examples=50)
    def test_psd_symmetric_unit_diagonal(self, X, s):
        K = kernel_matrix(X, s)
        assert np.array_equal(K, K.T)
        assert np.all(np.diag(K) == 1.0)
        # eigenvalues from scipy's LAPACK driver, independent of the package code
        from scipy.linalg import eigh
        assert eigh(K, eigvals_only=True).min() >= -1e-8


def test_median_distance():
    assert median_distance(np.array([[0.0], [1.0], [3.0]])) == 2.0
    assert median_distance(np.zeros((1, 2))) == 0.0


class TestKde:
    def test_peak_of_single_sample(self):
        h = 0.7
        assert kde_pdf([2.0], h, [2.0])[0] == pytest.approx(1 / (h * math.sqrt(2 * math.pi)), rel=1e-14)

    def test_formula(self):
        s = np.array([0.0, 1.0, 4.0])
        h = 1.3
        t = 2.2
        expected = sum(math.exp(-(t - v) ** 2 / (2 * h * h)) for v in s) / (3 * h * math.sqrt(2 * math.pi))
        assert kde_pdf(s, h, [t])[0] == pytest.approx(expected, rel=1e-13)

    @given(arrays(np.float64, st.integers(1, 200), elements=st.floats(-50, 50)), st.floats(0.05, 10))
    @settings(max_examples=40, deadline=None)
    def test_integrates_to_one(self, s, h):
        t = np.linspace(s.min() - 5 * h, s.max() + 5 * h, 2000)
        dens = kde_pdf(s, h, t)
        assert np.all(dens >= 0)
        # the grid must resolve each kernel for the quadrature to mean anything
        if (t[1] - t[0]) < h / 2:
            assert abs(np.trapezoid(dens, t) - 1.0) <= 1e-3

    def test_symmetric_samples_give_even_density(self):
        s = np.array([-3.0, -1.0, -0.5, 0.5, 1.0, 3.0])
        t = np.linspace(0, 6, 50)
        np.testing.assert_allclose(kde_pdf(s, 0.9, t), kde_pdf(s, 0.9, -t), rtol=0, atol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            kde_pdf([], 1.0, [0.0])


class TestSilverman:
    def test_matches_hand_formula(self):
        x = np.random.default_rng(3).standard_normal(100)
        mean = sum(x) / len(x)
        sd = math.sqrt(sum((v - mean) ** 2 for v in x) / (len(x) - 1))
        xs = sorted(x)

        def quantile(p):
            pos = p * (len(xs) - 1)
            lo = int(math.floor(pos))
            return xs[lo] + (pos - lo) * (xs[min(lo + 1, len(xs) - 1)] - xs[lo])

        iqr = (quantile(0.75) - quantile(0.25)) / 1.34
        assert silverman_bandwidth(x) == pytest.approx(0.9 * min(sd, iqr) * 100 ** -0.2, rel=1e-12)

    @given(arrays(np.float64, 20, elements=st.integers(-10**6, 10**6).map(lambda v: v / 1000)),
           st.floats(0.01, 100))
    def test_scale_homogeneous(self, x, c):
        if np.ptp(x) == 0:
            with pytest.raises(ValueError):
                silverman_bandwidth(x)
            return
        assert silverman_bandwidth(c * x) == pytest.approx(c * silverman_bandwidth(x), rel=1e-9)

    def test_two_samples(self):
        h = silverman_bandwidth([1.0, 2.0])
        assert math.isfinite(h) and h > 0

    def test_zero_spread_rejected(self):
        with pytest.raises(ValueError, match="spread"):
            silverman_bandwidth([5.0] * 10)

    def test_falls_back_to_std_when_iqr_vanishes(self):
        x = np.array([0.0] * 9 + [10.0])
        assert silverman_bandwidth(x) == pytest.approx(0.9 * x.std(ddof=1) * 10 ** -0.2)
