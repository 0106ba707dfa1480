"""Pure-numpy kernel backend.

Reference implementations: correct, dependency-light, and the fallback when
numba is unavailable or disabled. The convolutions ride BLAS via im2col, so
they match the numba backend's speed; the SMO and selection-sweep fallbacks
are vectorized where possible but markedly slower than their jit twins.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import common


def _im2col(x: np.ndarray) -> np.ndarray:
    """(n,h,w,ci) -> (n*h*w, ci*9) float64, pad 1, column order ci*9+dy*3+dx."""
    n, h, w, ci = x.shape
    xp = np.zeros((n, h + 2, w + 2, ci), dtype=np.float64)
    xp[:, 1:h + 1, 1:w + 1, :] = x
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (n,h,w,ci,3,3)
    return win.reshape(n * h * w, ci * 9)


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, h, wd, _ = x.shape
    co = w.shape[3]
    y = _im2col(x) @ common.weight_matrix(w)
    y += b.astype(np.float64)
    return y.reshape(n, h, wd, co).astype(x.dtype)


def conv3x3_backward_input(dy: np.ndarray, w: np.ndarray) -> np.ndarray:
    n, h, wd, _ = dy.shape
    ci = w.shape[2]
    dx = _im2col(dy) @ common.weight_matrix_flipped(w)
    return dx.reshape(n, h, wd, ci).astype(dy.dtype)


def conv3x3_backward_params(x: np.ndarray, dy: np.ndarray):
    n, h, wd, ci = x.shape
    co = dy.shape[3]
    dy2 = dy.reshape(n * h * wd, co).astype(np.float64)
    dw = _im2col(x).T @ dy2                      # (ci*9, co)
    dw = dw.reshape(ci, 3, 3, co).transpose(1, 2, 0, 3)
    db = dy2.sum(axis=0)
    return np.ascontiguousarray(dw), db


def assign_nearest_loop(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Exact-scan centroid assignment; ties -> lowest index."""
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    out = np.empty(x.shape[0], dtype=np.int64)
    for i in range(x.shape[0]):
        best = np.inf
        bj = 0
        for j in range(c.shape[0]):
            d = 0.0
            for t in range(c.shape[1]):
                diff = x[i, t] - c[j, t]
                d += diff * diff
            if d < best:
                best = d
                bj = j
        out[i] = bj
    return out


# ---- SMO ------------------------------------------------------------------
# Platt-style pairwise coordinate ascent on the SVM dual. The numba backend
# implements the identical update sequence; both are deterministic from the
# data order alone (second index = argmax |E_i - E_j|, ties -> lowest index,
# with an in-order fallback scan when the best step is degenerate).
#
# The minimal-progress guard scales with tol: steps below tol*(a+a'+tol) are
# rejected so the non-bound sweeps terminate and control returns to the full
# sweep, where bound points with large violations get re-examined. A fixed
# tiny guard instead lets microscopic non-bound churn starve those points.

_STEP_EPS = 1e-12


def _smo_take_step(i, j, K, y, alpha, E, b, C, eps):
    if i == j:
        return False, b
    ai, aj = alpha[i], alpha[j]
    yi, yj = y[i], y[j]
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
    E += c1 * K[i] + c2 * K[j] + db
    alpha[i] = ai_new
    alpha[j] = aj_new
    return True, b_new


def _smo_examine(i, K, y, alpha, E, b, C, tol):
    r = E[i] * y[i]
    if (r < -tol and alpha[i] < C) or (r > tol and alpha[i] > 0.0):
        d = np.abs(E - E[i])
        d[i] = -1.0
        jbest = int(np.argmax(d))
        ok, b = _smo_take_step(i, jbest, K, y, alpha, E, b, C, tol)
        if ok:
            return True, b
        for j in range(len(y)):
            if j == i or j == jbest:
                continue
            ok, b = _smo_take_step(i, j, K, y, alpha, E, b, C, tol)
            if ok:
                return True, b
    return False, b


def smo_solve(K: np.ndarray, y: np.ndarray, C: float, tol: float, max_passes: int):
    """Returns (alpha, b, sweeps, converged).

    Sweeps alternate between all indices and the non-bound subset; the solver
    converges when a full sweep changes nothing. max_passes caps the total
    sweep count."""
    n = len(y)
    alpha = np.zeros(n, dtype=np.float64)
    E = -y.astype(np.float64)
    b = 0.0
    examine_all = True
    sweeps = 0
    converged = False
    while sweeps < max_passes:
        changed = 0
        for i in range(n):
            if examine_all or (0.0 < alpha[i] < C):
                ok, b = _smo_examine(i, K, y, alpha, E, b, C, tol)
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


# ---- greedy-selection candidate sweep ---------------------------------------

def select_sweep(D, base, cand, tr_idx, tr_len, va_idx, va_len, inv_var, y,
                 gamma, C, tol, max_passes):
    """Score every candidate feature over the inner folds.

    D        (p, n, n) float32   per-feature squared differences
    base     (F, n, n) float64   accumulated scaled distances of selected features
    cand     (m,)      int64     candidate column ids
    tr_idx   (F, tmax) int64     fold-train row ids (padded), tr_len gives counts
    va_idx   (F, vmax) int64     fold-val row ids (padded), va_len gives counts
    inv_var  (F, p)    float64   per fold-train inverse variance (0 = constant)
    y        (n,)      float64   labels in {-1, +1}

    Returns (m,) int64: correctly classified validation samples summed over
    folds, for an RBF-SVM on (selected + candidate) with the given gamma.
    """
    m = len(cand)
    n_folds = base.shape[0]
    correct = np.zeros(m, dtype=np.int64)
    for ci in range(m):
        c = cand[ci]
        for f in range(n_folds):
            t = tr_len[f]
            v = va_len[f]
            tr = tr_idx[f, :t]
            va = va_idx[f, :v]
            w = inv_var[f, c]
            Dc = D[c].astype(np.float64)
            Ktr = np.exp(-gamma * (base[f][np.ix_(tr, tr)] + w * Dc[np.ix_(tr, tr)]))
            Kva = np.exp(-gamma * (base[f][np.ix_(va, tr)] + w * Dc[np.ix_(va, tr)]))
            ytr = y[tr]
            alpha, b, _, _ = smo_solve(Ktr, ytr, C, tol, max_passes)
            dec = Kva @ (alpha * ytr) + b
            pred = np.where(dec >= 0.0, 1.0, -1.0)
            correct[ci] += int(np.sum(pred == y[va]))
    return correct
