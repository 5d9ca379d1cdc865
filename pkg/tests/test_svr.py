import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from conftest import independent_kkt
from srrm.kernels import KernelSpec, gaussian_kernel, kernel_matrix
from srrm.svr import (EpsilonSVR, SvrConvergenceError, SvrError, SvrModel, SvrTrainConfig,
                      cross_validate, cv_scores, default_grid, dual_objective, fold_indices,
                      kkt_violation, model_from_text, model_to_text, svr_predict, svr_train,
                      svr_train_bruteforce)

SOLVERS = [svr_train, svr_train_bruteforce]


def small_problem(seed, n=None, d=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(2, 9))
    d = d or int(rng.integers(1, 4))
    X = rng.normal(size=(n, d))
    y = 3.0 * rng.normal(size=n)
    cfg = SvrTrainConfig(C=float(rng.choice([0.3, 3.0, 30.0])), epsilon=float(rng.uniform(0, 1.5)),
                         sigma=float(rng.uniform(0.3, 2.5)))
    return X, y, cfg


class TestTrainExamples:
    @pytest.mark.parametrize("solver", SOLVERS)
    def test_constant_target_needs_no_support_vectors(self, solver):
        X = np.linspace(0, 1, 6)[:, None]
        m = solver(X, np.full(6, 4.2), SvrTrainConfig(C=10, epsilon=0.1, sigma=0.5))
        assert m.n_support == 0
        assert m.bias == pytest.approx(4.2, abs=1e-9)
        assert svr_predict(m, np.array([17.0])) == pytest.approx(4.2, abs=1e-9)

    @pytest.mark.parametrize("solver", SOLVERS)
    @pytest.mark.parametrize("C", [100.0, 0.2])
    def test_two_point_hand_solution(self, solver, C):
        # dual reduces to max t - t^2 (1 - k) with beta = (-t, t), 0 <= t <= C
        X = np.array([[0.0], [1.0]])
        sigma = 0.8
        k = math.exp(-1 / (2 * sigma ** 2))
        t = min(1 / (2 * (1 - k)), C)
        m = solver(X, np.array([0.0, 1.0]), SvrTrainConfig(C=C, epsilon=0.0, sigma=sigma))
        np.testing.assert_allclose(m.train_dual, [-t, t], rtol=0, atol=1e-8)
        if t < C:
            assert m.bias == pytest.approx(0.5, abs=1e-8)
        else:
            # any bias in [C(1-k), 1 - C(1-k)] is optimal
            assert C * (1 - k) - 1e-8 <= m.bias <= 1 - C * (1 - k) + 1e-8

    def test_six_point_problem_matches_oracle(self):
        X = np.array([[-2.0], [-1.1], [0.0], [0.4], [1.3], [2.5]])
        y = np.array([1.0, -0.3, 0.2, 1.7, 0.4, -1.2])
        cfg = SvrTrainConfig(C=5.0, epsilon=0.2, sigma=0.9)
        a, b = svr_train(X, y, cfg), svr_train_bruteforce(X, y, cfg)
        K = kernel_matrix(X, cfg.sigma)
        assert abs(dual_objective(a.train_dual, K, y, cfg.epsilon)
                   - dual_objective(b.train_dual, K, y, cfg.epsilon)) <= 1e-6
        Z = np.linspace(-3, 3, 25)[:, None]
        assert np.abs(svr_predict(a, Z) - svr_predict(b, Z)).max() <= 1e-4

    def test_epsilon_tube_holds_on_linear_data(self):
        rng = np.random.default_rng(5)
        x = np.linspace(-2, 2, 30)
        y = 2 * x + rng.uniform(-0.2, 0.2, size=30)
        m = svr_train(x[:, None], y, SvrTrainConfig(C=1000.0, epsilon=0.3, sigma=1.0))
        assert np.abs(svr_predict(m, x[:, None]) - y).max() <= 0.3 + 1e-6


class TestModelInvariants:
    @given(st.integers(0, 10_000))
    @settings(max_examples=60, deadline=None)
    def test_feasibility_and_support_set(self, seed):
        X, y, cfg = small_problem(seed, n=int(np.random.default_rng(seed).integers(2, 25)))
        m = svr_train(X, y, cfg)
        beta = m.train_dual
        assert np.all(np.abs(beta) <= cfg.C * (1 + 1e-12))
        assert abs(beta.sum()) <= 1e-8
        sv = np.abs(beta) > 1e-10
        np.testing.assert_array_equal(m.support_vectors, X[sv])
        np.testing.assert_array_equal(m.dual_coeffs, beta[sv])
        assert independent_kkt(X, y, beta, m.bias, cfg.C, cfg.epsilon, cfg.sigma) <= cfg.tol
        assert kkt_violation(m, X, y) <= cfg.tol

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_agrees_with_oracle(self, seed):
        X, y, cfg = small_problem(seed)
        a, b = svr_train(X, y, cfg), svr_train_bruteforce(X, y, cfg)
        K = kernel_matrix(X, cfg.sigma)
        gap = abs(dual_objective(a.train_dual, K, y, cfg.epsilon) - dual_objective(b.train_dual, K, y, cfg.epsilon))
        assert gap <= 1e-6
        Z = np.random.default_rng(seed).normal(size=(10, X.shape[1]))
        assert np.abs(svr_predict(a, Z) - svr_predict(b, Z)).max() <= 1e-4

    @given(st.integers(0, 10_000), st.floats(-100, 100))
    @settings(max_examples=40, deadline=None)
    def test_translation_equivariance(self, seed, c):
        X, y, cfg = small_problem(seed, n=12)
        # the property is exact for the optimum, so solve to well below the 1e-8 comparison
        cfg = SvrTrainConfig(C=cfg.C, epsilon=cfg.epsilon, sigma=cfg.sigma, tol=1e-11)
        a, b = svr_train(X, y, cfg), svr_train(X, y + c, cfg)
        np.testing.assert_allclose(b.train_dual, a.train_dual, rtol=0, atol=1e-8)
        assert b.bias == pytest.approx(a.bias + c, abs=1e-8)
        Z = np.random.default_rng(seed).normal(size=(8, X.shape[1]))
        np.testing.assert_allclose(svr_predict(b, Z), svr_predict(a, Z) + c, rtol=0, atol=1e-8)

    def test_support_count_can_grow_with_epsilon(self):
        # a widened tube can turn two bounded multipliers into three free ones
        X = np.array([[1.383], [0.239], [-1.519]])
        y = np.array([0.36, 0.327, -1.764])
        counts = {}
        for solver in SOLVERS:
            counts[solver.__name__] = [solver(X, y, SvrTrainConfig(C=0.5, epsilon=e, sigma=1.675)).n_support
                                       for e in (0.8, 1.0)]
        assert counts == {"svr_train": [2, 3], "svr_train_bruteforce": [2, 3]}

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_optimal_value_nonincreasing_in_epsilon(self, seed):
        X, y, cfg = small_problem(seed, n=10)
        K = kernel_matrix(X, cfg.sigma)
        vals = []
        for eps in (0.0, 0.25, 0.5, 1.0, 2.0):
            m = svr_train(X, y, SvrTrainConfig(C=cfg.C, epsilon=eps, sigma=cfg.sigma))
            vals.append(dual_objective(m.train_dual, K, y, eps))
        assert all(b <= a + 1e-6 for a, b in zip(vals, vals[1:]))

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_wide_tube_has_no_support_vectors(self, seed):
        X, y, cfg = small_problem(seed, n=10)
        eps = 0.5 * np.ptp(y) + 1e-3
        m = svr_train(X, y, SvrTrainConfig(C=cfg.C, epsilon=eps, sigma=cfg.sigma))
        assert m.n_support == 0

    def test_deterministic(self):
        X, y, cfg = small_problem(3, n=20)
        a, b = svr_train(X, y, cfg), svr_train(X, y, cfg)
        np.testing.assert_array_equal(a.train_dual, b.train_dual)
        assert a.bias == b.bias


class TestTrainErrors:
    def test_non_finite_rejected(self):
        with pytest.raises(SvrError):
            svr_train(np.array([[0.0], [np.nan]]), np.zeros(2), SvrTrainConfig())
        with pytest.raises(SvrError):
            svr_train(np.zeros((2, 1)), np.array([0.0, np.inf]), SvrTrainConfig())

    def test_shape_mismatch(self):
        with pytest.raises(SvrError):
            svr_train(np.zeros((3, 1)), np.zeros(2), SvrTrainConfig())

    def test_non_convergence_reports_violation(self):
        X, y, _ = small_problem(11, n=30)
        with pytest.raises(SvrConvergenceError) as info:
            svr_train(X, y, SvrTrainConfig(C=100.0, epsilon=0.0, sigma=0.3, max_passes=1))
        assert info.value.violation > 1e-6

    @pytest.mark.parametrize("kw", [dict(C=0.0), dict(epsilon=-0.1), dict(sigma=0.0), dict(tol=0.0),
                                    dict(max_passes=0)])
    def test_bad_config(self, kw):
        with pytest.raises(SvrError):
            SvrTrainConfig(**kw)

    def test_oracle_size_limit(self):
        with pytest.raises(SvrError, match="n <= 10"):
            svr_train_bruteforce(np.zeros((11, 1)), np.zeros(11), SvrTrainConfig())


class TestPredict:
    def model(self, sv, beta, b, sigma=1.0):
        sv = np.atleast_2d(np.asarray(sv, dtype=float))
        return SvrModel(sv, np.asarray(beta, dtype=float), b, KernelSpec(sigma), 1.0, 0.1, sv.shape[1])

    def test_no_support_vectors_returns_bias(self):
        m = SvrModel(np.empty((0, 2)), np.empty(0), 3.5, KernelSpec(1.0), 1.0, 0.1, 2)
        assert svr_predict(m, np.array([9.0, -4.0])) == 3.5

    def test_lone_support_vector(self):
        m = self.model([[0.3, 0.7]], [1.0], 0.0)
        assert svr_predict(m, np.array([0.3, 0.7])) == 1.0

    def test_matches_kernel_expansion(self):
        m = self.model([[0.0], [2.0]], [0.7, -1.2], 0.25, sigma=1.5)
        z = np.array([0.9])
        expected = 0.7 * gaussian_kernel([0.0], z, 1.5) - 1.2 * gaussian_kernel([2.0], z, 1.5) + 0.25
        assert svr_predict(m, z) == pytest.approx(expected, abs=1e-14)

    @given(st.integers(0, 1000))
    @settings(max_examples=20, deadline=None)
    def test_batch_equals_singles_exactly(self, seed):
        X, y, cfg = small_problem(seed, n=15)
        m = svr_train(X, y, cfg)
        Z = np.random.default_rng(seed).normal(size=(7, X.shape[1]))
        batch = svr_predict(m, Z)
        assert all(batch[i] == svr_predict(m, Z[i]) for i in range(7))

    def test_dimension_mismatch(self):
        with pytest.raises(SvrError):
            svr_predict(self.model([[0.0, 1.0]], [1.0], 0.0), np.zeros(3))

    def test_non_finite_input(self):
        with pytest.raises(SvrError):
            svr_predict(self.model([[0.0]], [1.0], 0.0), np.array([np.nan]))


class TestCrossValidation:
    def test_single_point_grid(self):
        assert cross_validate(np.zeros((3, 1)), np.zeros(3), [(2.0, 0.5, 1.0)]) == (2.0, 0.5, 1.0)

    def test_underfitting_penalised(self):
        x = np.linspace(-3, 3, 40)
        X, y = x[:, None], 5.0 * x
        best = cross_validate(X, y, [(0.1, 0.1, 2.0), (100.0, 0.1, 2.0)], folds=5, seed=1)
        assert best[0] == 100.0

    def test_ties_go_to_flattest_model(self):
        X = np.linspace(0, 1, 10)[:, None]
        grid = default_grid(X, (1.0, 10.0), (0.5, 1.0), (0.5, 2.0))
        C, eps, sigma = cross_validate(X, np.full(10, 7.0), grid, folds=2)
        assert (C, eps) == (1.0, 1.0)
        assert sigma == max(g[2] for g in grid)

    def test_folds_deterministic_and_partition(self):
        a, b = fold_indices(23, 5, seed=9), fold_indices(23, 5, seed=9)
        assert all(np.array_equal(p, q) for p, q in zip(a, b))
        assert sorted(np.concatenate(a).tolist()) == list(range(23))
        assert fold_indices(23, 5, seed=10)[0].tolist() != a[0].tolist()

    def test_scores_are_out_of_fold_rmse(self):
        rng = np.random.default_rng(2)
        X, y = rng.normal(size=(12, 2)), rng.normal(size=12)
        (point, score), = cv_scores(X, y, [(3.0, 0.2, 1.0)], folds=3, seed=4)
        errs = []
        for hold in fold_indices(12, 3, seed=4):
            train = np.setdiff1d(np.arange(12), hold)
            m = svr_train(X[train], y[train], SvrTrainConfig(C=3.0, epsilon=0.2, sigma=1.0))
            errs.append(np.sqrt(np.mean((svr_predict(m, X[hold]) - y[hold]) ** 2)))
        assert score == pytest.approx(np.mean(errs), rel=1e-12)

    def test_degenerate_folds(self):
        with pytest.raises(SvrError):
            cv_scores(np.zeros((3, 1)), np.zeros(3), [(1.0, 0.1, 1.0)], folds=5)
        with pytest.raises(SvrError):
            cv_scores(np.zeros((3, 1)), np.zeros(3), [(1.0, 0.1, 1.0)], folds=1)

    def test_default_grid_scales_sigma_by_median_distance(self):
        X = np.array([[0.0], [1.0], [3.0]])
        grid = default_grid(X)
        assert len(grid) == 27
        assert sorted({g[2] for g in grid}) == [1.0, 2.0, 4.0]


def test_text_round_trip():
    X, y, cfg = small_problem(8, n=15)
    m = svr_train(X, y, cfg)
    back = model_from_text(model_to_text(m))
    np.testing.assert_array_equal(back.support_vectors, m.support_vectors)
    np.testing.assert_array_equal(back.dual_coeffs, m.dual_coeffs)
    assert (back.bias, back.kernel, back.C, back.epsilon, back.n_features) == \
        (m.bias, m.kernel, m.C, m.epsilon, m.n_features)
    Z = np.random.default_rng(0).normal(size=(5, X.shape[1]))
    np.testing.assert_array_equal(svr_predict(back, Z), svr_predict(m, Z))


class TestEstimator:
    def test_fit_predict_matches_functional_api(self):
        X, y, _ = small_problem(4, n=20)
        est = EpsilonSVR(C=5.0, epsilon=0.2, sigma=0.7).fit(X, y)
        m = svr_train(X, y, SvrTrainConfig(C=5.0, epsilon=0.2, sigma=0.7))
        np.testing.assert_array_equal(est.predict(X), svr_predict(m, X))
        assert est.intercept_ == m.bias
        np.testing.assert_array_equal(est.dual_coef_, m.dual_coeffs)

    def test_params_and_clone(self):
        est = EpsilonSVR(C=3.0, sigma=0.5)
        assert est.get_params()["C"] == 3.0
        c = clone(est)
        assert c.get_params() == est.get_params()

    def test_unfitted(self):
        with pytest.raises(NotFittedError):
            EpsilonSVR().predict(np.zeros((1, 1)))

    def test_score_is_r2(self):
        x = np.linspace(0, 1, 25)[:, None]
        y = np.sin(3 * x).ravel()
        assert EpsilonSVR(C=100.0, epsilon=0.01, sigma=0.3).fit(x, y).score(x, y) > 0.99
