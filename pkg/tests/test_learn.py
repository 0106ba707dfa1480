import numpy as np
import pytest

from deepbow import errors
from deepbow.learn import (SvmParams, correlation_rank, default_grid,
                           dual_objective, forward_select, grid_search,
                           qp_oracle, rbf_kernel, stratified_folds,
                           svm_decision, svm_predict, svm_train)


def _separable(n=30, gap=4.0, seed=0):
    rng = np.random.default_rng(seed)
    half = n // 2
    X = np.concatenate([rng.normal(size=(half, 2)),
                        rng.normal(size=(n - half, 2)) + gap])
    y = np.array([0] * half + [1] * (n - half))
    return X, y


def _random_instance(rng, n_max=20):
    n = int(rng.integers(4, n_max + 1))
    d = int(rng.integers(1, 5))
    X = rng.normal(size=(n, d))
    y = np.zeros(n, dtype=int)
    y[rng.permutation(n)[:n // 2]] = 1
    if y.min() == y.max():
        y[0] = 1 - y[0]
    C = float(rng.choice([0.1, 1.0, 10.0]))
    gamma = float(rng.choice([0.01, 0.1, 1.0]))
    return X, y, SvmParams(C=C, gamma=gamma)


def _kkt_violation(X, y, model, tol):
    """Largest violation of the dual optimality conditions."""
    params = model.params
    y_pm = np.where(np.asarray(y) == 1, 1.0, -1.0)
    dec = svm_decision(model, X)
    worst = 0.0
    alpha_full = np.zeros(len(y))
    alpha_full[model.support_idx] = model.alpha
    for i in range(len(y)):
        m = y_pm[i] * dec[i]
        a = alpha_full[i]
        if a < 1e-9:
            worst = max(worst, 1.0 - m)        # margin must be >= 1
        elif a > params.C - 1e-9:
            worst = max(worst, m - 1.0)        # margin must be <= 1
        else:
            worst = max(worst, abs(m - 1.0))   # on the margin
    worst = max(worst, abs(float(np.dot(alpha_full, y_pm))))
    return worst


class TestRbf:
    def test_hand_value(self):
        x = np.array([1.0, 2.0])
        z = np.array([3.0, -1.0])
        assert abs(rbf_kernel(x, z, 0.1) - np.exp(-0.1 * 13.0)) < 1e-15

    def test_params_validated(self):
        with pytest.raises(errors.ConfigError):
            SvmParams(C=0.0, gamma=1.0)
        with pytest.raises(errors.ConfigError):
            SvmParams(C=1.0, gamma=-2.0)
        with pytest.raises(errors.ConfigError):
            SvmParams(C=np.inf, gamma=1.0)


class TestSvmTrain:
    def test_separable_data(self):
        X, y = _separable()
        model = svm_train(X, y, SvmParams(C=10.0, gamma=0.5), max_passes=500)
        assert model.converged
        pred = np.array([svm_predict(model, x)[0] for x in X])
        assert np.array_equal(pred, y)

    def test_decision_sign_is_prediction(self):
        X, y = _separable(seed=3)
        model = svm_train(X, y, SvmParams(C=1.0, gamma=0.1))
        dec = svm_decision(model, X)
        labels, decs = svm_predict(model, X)
        assert np.array_equal(labels, (dec >= 0).astype(int))
        assert np.allclose(decs, dec)

    def test_single_class_rejected(self):
        X = np.random.default_rng(0).normal(size=(10, 2))
        with pytest.raises(errors.SingleClass):
            svm_train(X, np.ones(10, dtype=int), SvmParams(C=1.0, gamma=0.1))

    def test_oracle_equivalence_and_kkt(self):
        # dual objective within rel 1e-6 of the projected-gradient oracle,
        # identical training predictions, KKT satisfied at 1e-3
        rng = np.random.default_rng(42)
        for _ in range(25):
            X, y, params = _random_instance(rng)
            model = svm_train(X, y, params, tol=1e-6, max_passes=5000)
            sol = qp_oracle(X, y, params)
            K = np.exp(-params.gamma *
                       ((X[:, None, :] - X[None, :, :]) ** 2).sum(axis=2))
            y_pm = np.where(y == 1, 1.0, -1.0)
            alpha_full = np.zeros(len(y))
            alpha_full[model.support_idx] = model.alpha
            obj_smo = dual_objective(K, y_pm, alpha_full)
            obj_orc = dual_objective(K, y_pm, sol.alpha)
            assert obj_smo >= obj_orc - 1e-6 * (1.0 + abs(obj_orc))
            assert abs(obj_smo - obj_orc) <= 1e-6 * (1.0 + abs(obj_orc))
            dec_orc = K @ (sol.alpha * y_pm) + sol.bias
            pred_orc = (dec_orc >= 0).astype(int)
            pred_smo = (svm_decision(model, X) >= 0).astype(int)
            assert np.array_equal(pred_smo, pred_orc)
            assert _kkt_violation(X, y, model, 1e-3) <= 1e-3

    def test_oracle_size_cap(self):
        X = np.random.default_rng(0).normal(size=(60, 2))
        y = (np.arange(60) % 2)
        with pytest.raises(errors.ConfigError):
            qp_oracle(X, y, SvmParams(C=1.0, gamma=0.1))


class TestGrid:
    def test_default_grid_shape(self):
        grid = default_grid(50)
        assert len(grid) == 16
        assert all(isinstance(p, SvmParams) for p in grid)
        gammas = sorted({p.gamma for p in grid})
        assert np.allclose(gammas, [0.001 / 50, 0.01 / 50, 0.1 / 50, 1.0 / 50])

    def test_picks_best_cell(self):
        X, y = _separable(n=40, gap=1.2, seed=5)
        grid = [SvmParams(C=c, gamma=g)
                for c in (0.1, 1.0, 10.0) for g in (0.01, 0.1, 1.0)]
        best = grid_search(X, y, grid, folds=4, seed=0)
        assert best in grid

    def test_tie_prefers_small_c_then_gamma(self):
        # wide-margin data: every cell classifies perfectly, tie rules decide
        X, y = _separable(n=24, gap=30.0, seed=1)
        grid = [SvmParams(C=c, gamma=g) for c in (10.0, 1.0) for g in (0.5, 0.05)]
        best = grid_search(X, y, grid, folds=3, seed=0)
        assert best.C == 1.0 and best.gamma == 0.05

    def test_empty_grid(self):
        X, y = _separable()
        with pytest.raises(errors.EmptyGrid):
            grid_search(X, y, [], folds=3, seed=0)

    def test_stratified_folds_balance(self):
        y = np.array([1] * 9 + [0] * 6)
        folds = stratified_folds(y, 3, np.random.default_rng(0))
        assert sorted(np.concatenate([np.nonzero(folds == f)[0]
                                      for f in range(3)]).tolist()) == list(range(15))
        for f in range(3):
            members = folds == f
            assert y[members].sum() == 3
            assert (1 - y[members]).sum() == 2


class TestForwardSelect:
    def test_finds_planted_feature(self):
        rng = np.random.default_rng(4)
        n, p = 60, 12
        y = np.array([1, 0] * (n // 2))
        X = rng.normal(size=(n, p))
        X[:, 7] = y * 3.0 + rng.normal(scale=0.1, size=n)
        sel = forward_select(X, y, budget=3, seed=0)
        assert sel.selected[0] == 7
        assert len(sel.selected) == 3
        assert len(sel.accuracy_curve) == 3
        assert sel.accuracy_curve[0] > 0.9

    def test_budget_validation(self):
        X = np.random.default_rng(0).normal(size=(20, 5))
        y = np.array([0, 1] * 10)
        with pytest.raises(errors.BudgetExceedsFeatures):
            forward_select(X, y, budget=6, seed=0)
        with pytest.raises(errors.BudgetExceedsFeatures):
            forward_select(X, y, budget=0, seed=0)

    def test_determinism(self):
        rng = np.random.default_rng(9)
        X = rng.normal(size=(40, 8))
        y = np.array([0, 1] * 20)
        a = forward_select(X, y, budget=4, seed=5)
        b = forward_select(X, y, budget=4, seed=5)
        assert a.selected == b.selected
        assert a.accuracy_curve == b.accuracy_curve

    def test_no_repeats(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(30, 6))
        y = np.array([0, 1] * 15)
        sel = forward_select(X, y, budget=6, seed=1)
        assert len(set(sel.selected)) == 6


class TestCorrelationRank:
    def test_orders_by_absolute_correlation(self):
        rng = np.random.default_rng(6)
        n = 200
        y = rng.integers(0, 2, size=n).astype(float)
        X = np.empty((n, 4))
        X[:, 0] = rng.normal(size=n)                      # ~zero correlation
        X[:, 1] = -y * 2.0 + rng.normal(scale=0.1, size=n)  # strong negative
        X[:, 2] = y + rng.normal(scale=1.0, size=n)       # moderate
        X[:, 3] = 5.0                                     # constant
        order = correlation_rank(X, y)
        assert order[0] == 1
        assert order[1] == 2
        assert order[-1] == 3  # constants rank last

    def test_constant_only(self):
        X = np.ones((10, 2))
        y = np.array([0, 1] * 5)
        order = correlation_rank(X, y)
        assert sorted(order.tolist()) == [0, 1]
