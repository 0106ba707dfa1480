"""Backend parity: the numba kernels must reproduce the numpy fallback.

Convolutions share the same BLAS matmul on identical im2col layouts, so those
compare bitwise; the SMO solver runs the same update sequence in both, so
alphas compare to tight tolerance and the integer outputs exactly.
"""

import os
import subprocess
import sys

import numpy as np
import pytest

from deepbow.kernels import BACKEND, gram_rbf
from deepbow.kernels import _numpy_impl as npk

numba_impl = pytest.importorskip("deepbow.kernels._numba_impl",
                                 reason="numba backend unavailable")


def _conv_case(rng, n=3, ci=2, co=4, size=8):
    x = rng.normal(size=(n, size, size, ci))
    w = rng.normal(size=(3, 3, ci, co), scale=0.3)
    b = rng.normal(size=co, scale=0.1)
    return x, w, b


class TestConvParity:
    def test_forward_bitwise(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            x, w, b = _conv_case(rng)
            a = npk.conv3x3_forward(x, w, b)
            c = numba_impl.conv3x3_forward(x, w, b)
            assert np.array_equal(a, c)

    def test_backward_input_bitwise(self):
        rng = np.random.default_rng(1)
        _, w, _ = _conv_case(rng)
        dy = rng.normal(size=(3, 8, 8, 4))
        a = npk.conv3x3_backward_input(dy, w)
        c = numba_impl.conv3x3_backward_input(dy, w)
        assert np.array_equal(a, c)

    def test_backward_params_bitwise(self):
        rng = np.random.default_rng(2)
        x, _, _ = _conv_case(rng)
        dy = rng.normal(size=(3, 8, 8, 4))
        dw_a, db_a = npk.conv3x3_backward_params(x, dy)
        dw_c, db_c = numba_impl.conv3x3_backward_params(x, dy)
        assert np.array_equal(dw_a, dw_c)
        assert np.array_equal(db_a, db_c)


class TestAssignParity:
    def test_identical_indices(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            X = rng.normal(size=(40, 6))
            C = rng.normal(size=(5, 6))
            a = npk.assign_nearest_loop(X, C)
            c = numba_impl.assign_nearest_loop(X, C)
            assert np.array_equal(a, c)

    def test_tie_goes_to_lowest_index(self):
        X = np.zeros((1, 2))
        C = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])  # all distance 1
        assert npk.assign_nearest_loop(X, C)[0] == 0
        assert numba_impl.assign_nearest_loop(X, C)[0] == 0


class TestSmoParity:
    def _instance(self, rng, n=20):
        d = int(rng.integers(1, 4))
        X = np.concatenate([rng.normal(size=(n // 2, d)),
                            rng.normal(size=(n - n // 2, d)) + 2.0])
        y = np.array([-1.0] * (n // 2) + [1.0] * (n - n // 2))
        K = gram_rbf(X, X, 0.3)
        return np.ascontiguousarray(K), y

    def test_same_solution(self):
        rng = np.random.default_rng(4)
        for _ in range(8):
            K, y = self._instance(rng)
            C = float(rng.choice([0.5, 1.0, 10.0]))
            a1, b1, s1, c1 = npk.smo_solve(K, y, C, 1e-3, 200)
            a2, b2, s2, c2 = numba_impl.smo_solve(K, y, C, 1e-3, 200)
            assert np.allclose(a1, a2, rtol=1e-8, atol=1e-12)
            assert abs(b1 - b2) < 1e-8
            assert s1 == s2
            assert c1 == c2


class TestSelectSweepParity:
    def test_identical_counts(self):
        rng = np.random.default_rng(5)
        n, p = 18, 5
        X = rng.normal(size=(n, p))
        y = np.array([-1.0, 1.0] * (n // 2))
        X[:, 3] += y * 2.0
        D = np.empty((p, n, n), dtype=np.float32)
        for j in range(p):
            diff = X[:, j][:, None] - X[:, j][None, :]
            D[j] = (diff * diff).astype(np.float32)
        n_folds = 2
        base = np.zeros((n_folds, n, n), dtype=np.float64)
        # labels alternate, so pair-blocks keep both classes in every fold
        fold = (np.arange(n) // 2) % n_folds
        tr_len = np.array([np.sum(fold != f) for f in range(n_folds)], dtype=np.int64)
        va_len = np.array([np.sum(fold == f) for f in range(n_folds)], dtype=np.int64)
        tr_idx = np.zeros((n_folds, n), dtype=np.int64)
        va_idx = np.zeros((n_folds, n), dtype=np.int64)
        for f in range(n_folds):
            tr = np.nonzero(fold != f)[0]
            va = np.nonzero(fold == f)[0]
            tr_idx[f, :len(tr)] = tr
            va_idx[f, :len(va)] = va
        inv_var = np.ones((n_folds, p), dtype=np.float64)
        cand = np.arange(p, dtype=np.int64)
        args = (D, base, cand, tr_idx, tr_len, va_idx, va_len, inv_var, y,
                0.5, 1.0, 1e-3, 100)
        c1 = npk.select_sweep(*args)
        c2 = numba_impl.select_sweep(*args)
        assert np.array_equal(c1, c2)
        assert c1.dtype == np.int64
        # the planted column should win the sweep
        assert int(np.argmax(c1)) == 3


class TestEnvFlag:
    def test_disable_numba_selects_numpy(self):
        env = dict(os.environ, DEEPBOW_DISABLE_NUMBA="1")
        out = subprocess.run(
            [sys.executable, "-c",
             "from deepbow.kernels import BACKEND; print(BACKEND)"],
            capture_output=True, text=True, env=env, check=True)
        assert out.stdout.strip() == "numpy"

    def test_default_backend_here(self):
        expected = "numpy" if os.environ.get("DEEPBOW_DISABLE_NUMBA") == "1" \
            else "numba"
        assert BACKEND == expected
