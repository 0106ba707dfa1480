"""Soft-margin RBF-SVM with an SMO-style dual solver, a projected-gradient QP
oracle for verification, hyperparameter grid search, greedy forward feature
selection, and a correlation-ranking baseline.

Labels are {0, 1} at the API surface (1 = positive) and {-1, +1} internally.
The solver is deterministic from the data order alone: the working pair is
(first KKT violator in sweep order, argmax |E_i - E_j| with lowest-index
ties), with an in-order fallback scan when the best step degenerates.
"""

from dataclasses import dataclass, field

import numpy as np

from . import errors, kernels
from .features import FeatureMatrix

DEFAULT_TOL = 1e-3
DEFAULT_MAX_PASSES = 100
_SV_FLOOR = 1e-12
_VAR_FLOOR = 1e-24

DEFAULT_GRID_C = (0.1, 1.0, 10.0, 100.0)
DEFAULT_GRID_GAMMA_SCALE = (0.001, 0.01, 0.1, 1.0)  # divided by feature count


@dataclass(frozen=True)
class SvmParams:
    C: float
    gamma: float

    def __post_init__(self):
        if not (self.C > 0 and np.isfinite(self.C)
                and self.gamma > 0 and np.isfinite(self.gamma)):
            raise errors.ConfigError(f"C and gamma must be positive finite, got {self}")


@dataclass
class SvmModel:
    support_vectors: np.ndarray  # (m, d)
    dual_coef: np.ndarray        # (m,) alpha_i * y_i
    alpha: np.ndarray            # (m,) alpha_i > 1e-12
    support_idx: np.ndarray      # (m,) indices into the training order
    bias: float
    params: SvmParams
    feature_names: list = None
    converged: bool = True
    sweeps: int = 0
    n_train: int = 0


@dataclass
class SelectionResult:
    selected: list               # ordered column indices
    names: list
    accuracy_curve: list         # inner-CV accuracy after each addition
    budget: int


@dataclass
class DualSolution:
    alpha: np.ndarray
    bias: float
    objective: float
    iterations: int


def rbf_kernel(x, z, gamma: float) -> float:
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x.shape != z.shape:
        raise errors.DimMismatch(f"{x.shape} vs {z.shape}")
    d = x - z
    return float(np.exp(-gamma * np.dot(d, d)))


def _unpack(X, y):
    if isinstance(X, FeatureMatrix):
        return np.asarray(X.values, dtype=np.float64), np.asarray(X.labels), X.names
    return np.asarray(X, dtype=np.float64), np.asarray(y), None


def _to_pm1(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    out = np.where(y > 0.5, 1.0, -1.0) if y.min() >= 0 else y.copy()
    if not (np.any(out > 0) and np.any(out < 0)):
        raise errors.SingleClass("training set has a single class")
    return out


def dual_objective(K: np.ndarray, y_pm: np.ndarray, alpha: np.ndarray) -> float:
    v = alpha * y_pm
    return float(alpha.sum() - 0.5 * v @ K @ v)


def _recover_bias(K: np.ndarray, y_pm: np.ndarray, alpha: np.ndarray,
                  C: float) -> float:
    """Canonical bias for a dual point: mean over free support vectors, or the
    midpoint of the KKT-feasible interval when every alpha sits at a bound.

    Without free vectors the optimal bias is an interval, so two exact solvers
    can disagree unless both commit to the same point in it."""
    f0 = K @ (alpha * y_pm)
    delta = 1e-7 * C
    free = np.nonzero((alpha > delta) & (alpha < C - delta))[0]
    if free.size:
        return float(np.mean(y_pm[free] - f0[free]))
    lo, hi = -np.inf, np.inf
    for i in range(len(y_pm)):
        v = y_pm[i] - f0[i]
        at_zero = alpha[i] <= delta
        if (at_zero and y_pm[i] > 0) or (not at_zero and y_pm[i] < 0):
            lo = max(lo, v) if np.isfinite(lo) else v
        else:
            hi = min(hi, v) if np.isfinite(hi) else v
    if not np.isfinite(lo):
        return float(hi)
    if not np.isfinite(hi):
        return float(lo)
    return float(0.5 * (lo + hi))


def svm_train(X, y=None, params: SvmParams = None, tol: float = DEFAULT_TOL,
              max_passes: int = DEFAULT_MAX_PASSES) -> SvmModel:
    """SMO-style dual optimization; returns the model even without
    convergence, flagged via .converged."""
    Xv, yv, names = _unpack(X, y)
    y_pm = _to_pm1(yv)
    K = kernels.gram_rbf(Xv, Xv, params.gamma)
    alpha, _, sweeps, converged = kernels.smo_solve(
        np.ascontiguousarray(K), y_pm, float(params.C), float(tol), int(max_passes))
    b = _recover_bias(K, y_pm, alpha, float(params.C))
    sv = np.nonzero(alpha > _SV_FLOOR)[0]
    return SvmModel(support_vectors=Xv[sv].copy(),
                    dual_coef=(alpha * y_pm)[sv],
                    alpha=alpha[sv], support_idx=sv,
                    bias=float(b), params=params, feature_names=names,
                    converged=bool(converged), sweeps=int(sweeps),
                    n_train=len(yv))


def svm_decision(model: SvmModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None]
    if X.shape[1] != model.support_vectors.shape[1]:
        raise errors.DimMismatch(
            f"feature dim {X.shape[1]} vs model {model.support_vectors.shape[1]}")
    dec = kernels.gram_rbf(X, model.support_vectors, model.params.gamma) \
        @ model.dual_coef + model.bias
    return dec[0] if single else dec


def svm_predict(model: SvmModel, x):
    """(label, decision_value); decision 0 maps to the positive label."""
    dec = svm_decision(model, x)
    if np.ndim(dec) == 0:
        return (1 if dec >= 0.0 else 0), float(dec)
    return np.where(dec >= 0.0, 1, 0).astype(np.int8), dec


# ---- QP oracle -----------------------------------------------------------------

_PG_TARGET = 1e-10
_PG_MAX_ITER = 500_000


def _project_box_hyperplane(v: np.ndarray, y_pm: np.ndarray, C: float) -> np.ndarray:
    """Euclidean projection onto {0 <= a <= C, sum a_i y_i = 0}.

    alpha(lam) = clip(v - lam*y, 0, C) makes g(lam) = y @ alpha(lam) monotone
    non-increasing; bisection pins the root."""
    lo = -(np.abs(v).max() + C + 1.0)
    hi = -lo
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        g = y_pm @ np.clip(v - mid * y_pm, 0.0, C)
        if g > 0.0:
            lo = mid
        else:
            hi = mid
    a = np.clip(v - 0.5 * (lo + hi) * y_pm, 0.0, C)
    r = float(y_pm @ a)
    if r != 0.0:
        margin = np.minimum(a, C - a)
        ok = np.nonzero(margin > abs(r))[0]
        if ok.size:
            a = a.copy()
            a[ok[0]] -= y_pm[ok[0]] * r
    return a


def qp_oracle(X, y=None, params: SvmParams = None) -> DualSolution:
    """Maximize the SVM dual by FISTA-accelerated projected gradient with an
    exact feasibility projection. Slow but independently trustworthy; n <= 50.
    """
    Xv, yv, _ = _unpack(X, y)
    n = len(yv)
    if n > 50:
        raise errors.ConfigError(f"qp_oracle limited to n <= 50, got {n}")
    y_pm = _to_pm1(yv)
    C = float(params.C)
    K = kernels.gram_rbf(Xv, Xv, params.gamma)
    Q = K * np.outer(y_pm, y_pm)
    lip = float(np.linalg.eigvalsh(Q)[-1])
    step = 1.0 / max(lip, 1e-12)

    def objective(a):
        return float(a.sum() - 0.5 * a @ Q @ a)

    alpha = _project_box_hyperplane(np.zeros(n), y_pm, C)
    zv = alpha.copy()
    t_mom = 1.0
    best_obj = objective(alpha)
    it = 0
    while it < _PG_MAX_ITER:
        it += 1
        grad = 1.0 - Q @ zv
        nxt = _project_box_hyperplane(zv + step * grad, y_pm, C)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_mom * t_mom))
        zv = nxt + ((t_mom - 1.0) / t_next) * (nxt - alpha)
        move = float(np.linalg.norm(nxt - alpha)) / step
        alpha = nxt
        t_mom = t_next
        obj = objective(alpha)
        if obj < best_obj - 1e-14 * (1.0 + abs(best_obj)):
            zv = alpha.copy()   # momentum restart
            t_mom = 1.0
        best_obj = max(best_obj, obj)
        if move <= _PG_TARGET * (1.0 + C):
            # true fixed-point check without momentum
            g2 = 1.0 - Q @ alpha
            fixed = _project_box_hyperplane(alpha + step * g2, y_pm, C)
            if float(np.linalg.norm(fixed - alpha)) / step <= _PG_TARGET * (1.0 + C):
                break
            zv = fixed.copy()
            t_mom = 1.0
            alpha = fixed

    b = _recover_bias(K, y_pm, alpha, C)
    return DualSolution(alpha=alpha, bias=float(b),
                        objective=objective(alpha), iterations=it)


# ---- folds ----------------------------------------------------------------------

def stratified_folds(y, n_folds: int, rng) -> np.ndarray:
    """Fold id per sample: per-class shuffle, round-robin deal."""
    y = np.asarray(y)
    fold = np.empty(len(y), dtype=np.int64)
    for cls in (0, 1):
        idx = np.nonzero((y > 0.5) == bool(cls))[0]
        idx = idx[rng.permutation(len(idx))]
        fold[idx] = np.arange(len(idx)) % n_folds
    return fold


# ---- grid search -----------------------------------------------------------------

def default_grid(n_features: int) -> list:
    return [SvmParams(C=c, gamma=g / float(n_features))
            for c in DEFAULT_GRID_C for g in DEFAULT_GRID_GAMMA_SCALE]


def grid_search(X, y, grid: list, folds: int = 5, seed: int = 0,
                tol: float = DEFAULT_TOL,
                max_passes: int = DEFAULT_MAX_PASSES) -> SvmParams:
    """Best params by stratified k-fold CV accuracy; ties prefer smaller C,
    then smaller gamma."""
    if not grid:
        raise errors.EmptyGrid("hyperparameter grid is empty")
    Xv, yv, _ = _unpack(X, y)
    y_pm = _to_pm1(yv)
    rng = np.random.default_rng(seed)
    fold = stratified_folds(yv, folds, rng)
    best = None
    for p in grid:
        accs = []
        for f in range(folds):
            tr = fold != f
            va = ~tr
            if not va.any() or len(np.unique(y_pm[tr])) < 2:
                continue
            model = svm_train(Xv[tr], (y_pm[tr] > 0).astype(np.int8), p,
                              tol=tol, max_passes=max_passes)
            pred, _ = svm_predict(model, Xv[va])
            accs.append(float(np.mean(pred == (y_pm[va] > 0))))
        mean_acc = float(np.mean(accs)) if accs else 0.0
        key = (-mean_acc, p.C, p.gamma)
        if best is None or key < best[0]:
            best = (key, p)
    return best[1]


# ---- greedy forward selection ------------------------------------------------------

def forward_select(X, y=None, budget: int = 10, inner_folds: int = 3,
                   seed: int = 0, C: float = 1.0, tol: float = DEFAULT_TOL,
                   max_passes: int = DEFAULT_MAX_PASSES) -> SelectionResult:
    """Greedy wrapper selection with a fixed RBF-SVM (C=1, gamma=1/d_subset).

    Each step scores every remaining column by stratified inner-fold CV
    accuracy of the SVM on (selected + candidate), with per-fold z-scoring
    folded into the distance matrices (scaling each feature's squared
    differences by the fold-train inverse variance). Ties resolve to the
    lowest column index. The accuracy curve records the winner's score per
    step.
    """
    Xv, yv, names = _unpack(X, y)
    n, p = Xv.shape
    if budget < 1 or budget > p:
        raise errors.BudgetExceedsFeatures(f"budget {budget} vs {p} columns")
    y_pm = _to_pm1(yv)
    rng = np.random.default_rng(seed)
    fold = stratified_folds(yv, inner_folds, rng)

    diffs = Xv[:, None, :] - Xv[None, :, :]
    D = np.ascontiguousarray((diffs * diffs).transpose(2, 0, 1), dtype=np.float32)

    tmax = max(int(np.sum(fold != f)) for f in range(inner_folds))
    vmax = max(int(np.sum(fold == f)) for f in range(inner_folds))
    tr_idx = np.zeros((inner_folds, tmax), dtype=np.int64)
    va_idx = np.zeros((inner_folds, vmax), dtype=np.int64)
    tr_len = np.zeros(inner_folds, dtype=np.int64)
    va_len = np.zeros(inner_folds, dtype=np.int64)
    inv_var = np.zeros((inner_folds, p), dtype=np.float64)
    for f in range(inner_folds):
        tr = np.nonzero(fold != f)[0]
        va = np.nonzero(fold == f)[0]
        tr_idx[f, :len(tr)] = tr
        va_idx[f, :len(va)] = va
        tr_len[f] = len(tr)
        va_len[f] = len(va)
        var = Xv[tr].var(axis=0)
        np.divide(1.0, var, out=inv_var[f], where=var > _VAR_FLOOR)

    base = np.zeros((inner_folds, n, n), dtype=np.float64)
    selected: list = []
    curve: list = []
    remaining = np.arange(p, dtype=np.int64)
    total_val = int(va_len.sum())
    for _ in range(budget):
        gamma = 1.0 / float(len(selected) + 1)
        counts = kernels.select_sweep(D, base, remaining, tr_idx, tr_len,
                                      va_idx, va_len, inv_var, y_pm,
                                      gamma, float(C), float(tol), int(max_passes))
        pos = int(np.argmax(counts))
        chosen = int(remaining[pos])
        curve.append(float(counts[pos]) / float(total_val))
        selected.append(chosen)
        for f in range(inner_folds):
            base[f] += inv_var[f, chosen] * D[chosen].astype(np.float64)
        remaining = np.delete(remaining, pos)
    sel_names = [names[i] for i in selected] if names else [f"col{i}" for i in selected]
    return SelectionResult(selected=selected, names=sel_names,
                           accuracy_curve=curve, budget=budget)


# ---- correlation ranking ------------------------------------------------------------

def correlation_rank(X, y=None) -> np.ndarray:
    """Columns by |Pearson r with labels| descending; constant columns carry
    r = 0 and rank after everything else (ties otherwise break by index)."""
    Xv, yv, _ = _unpack(X, y)
    if len(yv) < 2:
        raise errors.TooFewSamples("correlation needs >= 2 samples")
    yc = np.asarray(yv, dtype=np.float64)
    yc = yc - yc.mean()
    sy = np.sqrt((yc * yc).sum())
    xc = Xv - Xv.mean(axis=0)
    sx = np.sqrt((xc * xc).sum(axis=0))
    constant = sx < 1e-300
    denom = np.where(constant, 1.0, sx) * (sy if sy > 0 else 1.0)
    r = np.abs(xc.T @ yc) / denom
    r[constant] = 0.0
    if sy == 0:
        r[:] = 0.0
    order = np.lexsort((np.arange(len(r)), constant.astype(np.int8), -r))
    return order
