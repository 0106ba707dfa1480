"""Numba kernel backend.

Mirrors _numpy_impl exactly: same update sequences, same accumulation orders.
Convolutions jit the im2col gather and share the BLAS matmul with the numpy
backend (both are gemm-bound, so outputs are bit-identical); the wins live in
the scalar-loop kernels - SMO, centroid assignment, and the selection sweep,
which parallelizes over candidates (each iteration owns one output slot, so
results do not depend on thread count).
"""

import math
import warnings

import numpy as np

# the threading-layer probe warns about a stale system TBB; the workqueue
# fallback it picks is fully functional, so keep the log clean
warnings.filterwarnings("ignore", message=".*TBB.*")

from numba import njit, prange

from . import common

_STEP_EPS = 1e-12


@njit(cache=True)
def _im2col_nb(x):
    n, h, w, ci = x.shape
    col = np.zeros((n * h * w, ci * 9), dtype=np.float64)
    for s in range(n):
        for i in range(h):
            for j in range(w):
                row = (s * h + i) * w + j
                for c in range(ci):
                    for dy in range(3):
                        ii = i + dy - 1
                        if ii < 0 or ii >= h:
                            continue
                        for dx in range(3):
                            jj = j + dx - 1
                            if jj < 0 or jj >= w:
                                continue
                            col[row, c * 9 + dy * 3 + dx] = x[s, ii, jj, c]
    return col


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, h, wd, _ = x.shape
    co = w.shape[3]
    y = _im2col_nb(x) @ common.weight_matrix(w)
    y += b.astype(np.float64)
    return y.reshape(n, h, wd, co).astype(x.dtype)


def conv3x3_backward_input(dy: np.ndarray, w: np.ndarray) -> np.ndarray:
    n, h, wd, _ = dy.shape
    ci = w.shape[2]
    dx = _im2col_nb(dy) @ common.weight_matrix_flipped(w)
    return dx.reshape(n, h, wd, ci).astype(dy.dtype)


def conv3x3_backward_params(x: np.ndarray, dy: np.ndarray):
    n, h, wd, ci = x.shape
    co = dy.shape[3]
    dy2 = dy.reshape(n * h * wd, co).astype(np.float64)
    dw = _im2col_nb(x).T @ dy2
    dw = dw.reshape(ci, 3, 3, co).transpose(1, 2, 0, 3)
    db = dy2.sum(axis=0)
    return np.ascontiguousarray(dw), db


@njit(cache=True)
def assign_nearest_loop(x, centroids):
    n = x.shape[0]
    k = centroids.shape[0]
    d = x.shape[1]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = np.inf
        bj = 0
        for j in range(k):
            acc = 0.0
            for t in range(d):
                diff = x[i, t] - centroids[j, t]
                acc += diff * diff
            if acc < best:
                best = acc
                bj = j
        out[i] = bj
    return out


@njit(cache=True)
def _take_step(i, j, K, y, alpha, E, b, C, eps):
    if i == j:
        return False, b
    ai = alpha[i]
    aj = alpha[j]
    yi = y[i]
    yj = y[j]
    if yi != yj:
        L = max(0.0, aj - ai)
        H = min(C, C + aj - ai)
    else:
        L = max(0.0, ai + aj - C)
        H = min(C, ai + aj)
    if H - L < _STEP_EPS:
        return False, b
    eta = K[i, i] + K[j, j] - 2.0 * K[i, j]
    if eta <= _STEP_EPS:
        return False, b
    aj_new = aj + yj * (E[i] - E[j]) / eta
    if aj_new < L:
        aj_new = L
    elif aj_new > H:
        aj_new = H
    if abs(aj_new - aj) < eps * (aj_new + aj + eps):
        return False, b
    ai_new = ai + yi * yj * (aj - aj_new)
    dai = ai_new - ai
    daj = aj_new - aj
    b1 = b - E[i] - yi * dai * K[i, i] - yj * daj * K[i, j]
    b2 = b - E[j] - yi * dai * K[i, j] - yj * daj * K[j, j]
    if 0.0 < ai_new < C:
        b_new = b1
    elif 0.0 < aj_new < C:
        b_new = b2
    else:
        b_new = 0.5 * (b1 + b2)
    c1 = yi * dai
    c2 = yj * daj
    db = b_new - b
    n = K.shape[0]
    for t in range(n):
        a = c1 * K[i, t]
        bb = c2 * K[j, t]
        E[t] = E[t] + ((a + bb) + db)
    alpha[i] = ai_new
    alpha[j] = aj_new
    return True, b_new


@njit(cache=True)
def _examine(i, K, y, alpha, E, b, C, tol):
    r = E[i] * y[i]
    if (r < -tol and alpha[i] < C) or (r > tol and alpha[i] > 0.0):
        n = K.shape[0]
        best = -1.0
        jbest = 0
        for j in range(n):
            if j == i:
                continue
            v = abs(E[j] - E[i])
            if v > best:
                best = v
                jbest = j
        ok, b = _take_step(i, jbest, K, y, alpha, E, b, C, tol)
        if ok:
            return True, b
        for j in range(n):
            if j == i or j == jbest:
                continue
            ok, b = _take_step(i, j, K, y, alpha, E, b, C, tol)
            if ok:
                return True, b
    return False, b


@njit(cache=True)
def smo_solve(K, y, C, tol, max_passes):
    n = y.shape[0]
    alpha = np.zeros(n, dtype=np.float64)
    E = np.empty(n, dtype=np.float64)
    for i in range(n):
        E[i] = -y[i]
    b = 0.0
    examine_all = True
    sweeps = 0
    converged = False
    while sweeps < max_passes:
        changed = 0
        for i in range(n):
            if examine_all or (0.0 < alpha[i] < C):
                ok, b = _examine(i, K, y, alpha, E, b, C, tol)
                if ok:
                    changed += 1
        sweeps += 1
        if examine_all:
            if changed == 0:
                converged = True
                break
            examine_all = False
        elif changed == 0:
            examine_all = True
    return alpha, b, sweeps, converged


@njit(cache=True, parallel=True)
def select_sweep(D, base, cand, tr_idx, tr_len, va_idx, va_len, inv_var, y,
                 gamma, C, tol, max_passes):
    m = cand.shape[0]
    n_folds = base.shape[0]
    correct = np.zeros(m, dtype=np.int64)
    for ci in prange(m):
        c = cand[ci]
        total = 0
        for f in range(n_folds):
            t = tr_len[f]
            v = va_len[f]
            w = inv_var[f, c]
            Ktr = np.empty((t, t), dtype=np.float64)
            for a in range(t):
                ia = tr_idx[f, a]
                for bb in range(t):
                    ib = tr_idx[f, bb]
                    Ktr[a, bb] = math.exp(-gamma * (base[f, ia, ib] + w * D[c, ia, ib]))
            ytr = np.empty(t, dtype=np.float64)
            for a in range(t):
                ytr[a] = y[tr_idx[f, a]]
            alpha, b, _, _ = smo_solve(Ktr, ytr, C, tol, max_passes)
            for q in range(v):
                iv = va_idx[f, q]
                dec = b
                for a in range(t):
                    ia = tr_idx[f, a]
                    dec += alpha[a] * ytr[a] * math.exp(
                        -gamma * (base[f, iv, ia] + w * D[c, iv, ia]))
                pred = 1.0 if dec >= 0.0 else -1.0
                if pred == y[iv]:
                    total += 1
        correct[ci] = total
    return correct
