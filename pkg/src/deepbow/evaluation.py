"""Confusion metrics, the repeated stratified-split CV protocol, the heldout
ensemble protocol, the fit-consumption log with its leakage audit, and cohort
histogram comparison.

Labels are 0/1 with 1 = positive (patient). All randomness flows through
seed-derived generators, so reports are bitwise reproducible for a fixed
master seed.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import errors
from .features import (FeatureMatrix, standardize_apply, standardize_fit)
from .learn import default_grid, forward_select, grid_search, svm_predict, svm_train
from .seeding import derive_rng, derive_seed

# ---- Eq.-style metrics ---------------------------------------------------------


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _check_pair(predictions, labels):
    p = np.asarray(predictions).ravel()
    t = np.asarray(labels).ravel()
    if len(p) != len(t) or len(p) < 1:
        raise errors.LengthMismatch(
            f"predictions {len(p)} vs labels {len(t)} (both must be >= 1)")
    return (p > 0.5).astype(np.int8), (t > 0.5).astype(np.int8)


def confusion_counts(predictions, labels) -> ConfusionCounts:
    p, t = _check_pair(predictions, labels)
    return ConfusionCounts(tp=int(np.sum((p == 1) & (t == 1))),
                           fp=int(np.sum((p == 1) & (t == 0))),
                           tn=int(np.sum((p == 0) & (t == 0))),
                           fn=int(np.sum((p == 0) & (t == 1))))


def confusion_metrics(predictions, labels):
    """(accuracy, sensitivity, specificity); a zero denominator yields NaN
    rather than raising."""
    c = confusion_counts(predictions, labels)
    acc = (c.tp + c.tn) / c.total
    sens = c.tp / (c.tp + c.fn) if (c.tp + c.fn) else math.nan
    spec = c.tn / (c.tn + c.fp) if (c.tn + c.fp) else math.nan
    return float(acc), float(sens), float(spec)


# ---- splits ---------------------------------------------------------------------


def stratified_split(labels, val_fraction: float, rng):
    """(train_idx, val_idx): per-class ceil(val_fraction * n_c) drawn into the
    validation side, the rest train. Indices ascend within each side."""
    y = np.asarray(labels)
    if not 0.0 < val_fraction < 1.0:
        raise errors.ConfigError(f"val_fraction must be in (0,1), got {val_fraction}")
    val_parts = []
    for cls in (1, 0):
        idx = np.nonzero((y > 0.5) == bool(cls))[0]
        n_val = int(math.ceil(val_fraction * len(idx)))
        if n_val >= len(idx):
            raise errors.SingleClass(f"class {cls} would lose all samples to validation")
        take = rng.permutation(len(idx))[:n_val]
        val_parts.append(idx[take])
    val_idx = np.sort(np.concatenate(val_parts))
    mask = np.ones(len(y), dtype=bool)
    mask[val_idx] = False
    return np.nonzero(mask)[0], val_idx


def stratified_take(labels, count: int, rng) -> np.ndarray:
    """Draw `count` indices stratified by largest-remainder apportionment."""
    y = np.asarray(labels)
    if count < 1 or count >= len(y):
        raise errors.TooFewSamples(f"cannot hold out {count} of {len(y)}")
    classes = (1, 0)
    sizes = [int(np.sum((y > 0.5) == bool(c))) for c in classes]
    quotas = [count * s / len(y) for s in sizes]
    base = [int(math.floor(q)) for q in quotas]
    leftover = count - sum(base)
    order = sorted(range(len(classes)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[:leftover]:
        base[i] += 1
    parts = []
    for c, n_take in zip(classes, base):
        idx = np.nonzero((y > 0.5) == bool(c))[0]
        if n_take > len(idx):
            raise errors.TooFewSamples(f"class {c} has {len(idx)} < {n_take}")
        take = rng.permutation(len(idx))[:n_take]
        parts.append(idx[take])
    return np.sort(np.concatenate(parts))


# ---- fit log and leakage audit ----------------------------------------------------


@dataclass(frozen=True)
class FitRecord:
    kind: str    # norm | cae | codebook | standardize | selection | grid | svm
    scope: str   # "protocol", "round:2", "split:r07", "round:2/split:m2.31"
    ids: tuple   # subject ids consumed by the fit


class FitLog:
    """Append-only record of which subject ids each fit consumed.

    Scope strings are slash-joined segments. register() attaches the set of
    ids that are off-limits for a segment (a split's validation ids, a
    round's heldout ids); audit() then checks every record against the
    forbidden sets of all its segments.
    """

    def __init__(self):
        self.records: list = []
        self._forbidden: dict = {}

    def register(self, segment: str, excluded_ids):
        if "/" in segment:
            raise errors.ScopeMismatch(f"register takes a single segment, got {segment!r}")
        if segment in self._forbidden:
            raise errors.ScopeMismatch(f"scope segment {segment!r} already registered")
        self._forbidden[segment] = frozenset(excluded_ids)

    def record(self, kind: str, scope: str, ids):
        self.records.append(FitRecord(kind=kind, scope=scope, ids=tuple(ids)))

    def audit(self) -> list:
        """Violations as dicts; empty list means the log is leak-free."""
        out = []
        for rec in self.records:
            for seg in rec.scope.split("/"):
                if seg == "protocol":
                    continue
                if seg not in self._forbidden:
                    out.append({"kind": rec.kind, "scope": rec.scope,
                                "leaked": [], "reason": f"unregistered segment {seg!r}"})
                    continue
                leaked = self._forbidden[seg].intersection(rec.ids)
                if leaked:
                    out.append({"kind": rec.kind, "scope": rec.scope,
                                "leaked": sorted(leaked), "reason": "forbidden id in fit"})
        return out

    def summary(self) -> dict:
        kinds = {}
        for rec in self.records:
            kinds[rec.kind] = kinds.get(rec.kind, 0) + 1
        return {"n_fits": len(self.records), "by_kind": dict(sorted(kinds.items())),
                "n_registered_scopes": len(self._forbidden)}


# ---- feature sources ---------------------------------------------------------------


class MatrixSource:
    """Feature source backed by one precomputed matrix. Only the per-split
    stages (selection, standardization, grid, SVM) ever refit."""

    def __init__(self, matrix: FeatureMatrix):
        self.matrix = matrix
        self.names = list(matrix.names)
        self.labels = np.asarray(matrix.labels, dtype=np.int8)
        self.subject_ids = list(matrix.subject_ids)
        self.n = len(self.labels)

    def materialize(self, train_idx, val_idx, heldout_idx, scope, fit_log):
        X = np.asarray(self.matrix.values, dtype=np.float64)
        held = X[heldout_idx] if heldout_idx is not None else None
        return X[train_idx], X[val_idx], held, self.names

    def round_source(self, scope, pool_idx, heldout_idx, fit_log):
        return self


def _as_source(features):
    if isinstance(features, FeatureMatrix):
        return MatrixSource(features)
    return features


# ---- protocol configs ---------------------------------------------------------------


@dataclass
class CvConfig:
    repeats: int = 50
    val_fraction: float = 0.2
    master_seed: int = 7
    budget: int = 10
    inner_folds: int = 3
    grid: list = None            # explicit SvmParams list; None -> built per split
    grid_C: tuple = None         # C values for the built grid (None -> defaults)
    grid_gamma_scale: tuple = None  # gamma numerators, divided by selected dim
    grid_folds: int = 5
    svm_tol: float = 1e-3
    svm_max_passes: int = 100

    def echo(self) -> dict:
        return {"repeats": self.repeats, "val_fraction": self.val_fraction,
                "master_seed": self.master_seed, "budget": self.budget,
                "inner_folds": self.inner_folds,
                "grid_size": len(self.grid) if self.grid else None,
                "grid_C": list(self.grid_C) if self.grid_C else None,
                "grid_gamma_scale": (list(self.grid_gamma_scale)
                                     if self.grid_gamma_scale else None),
                "grid_folds": self.grid_folds, "svm_tol": self.svm_tol,
                "svm_max_passes": self.svm_max_passes}


@dataclass
class HeldoutConfig:
    rounds: int = 6
    heldout_size: int = 20
    ensemble_size: int = 50
    val_fraction: float = 0.2
    master_seed: int = 7
    budget: int = 10
    inner_folds: int = 3
    grid: list = None
    grid_C: tuple = None
    grid_gamma_scale: tuple = None
    grid_folds: int = 5
    svm_tol: float = 1e-3
    svm_max_passes: int = 100

    def echo(self) -> dict:
        return {"rounds": self.rounds, "heldout_size": self.heldout_size,
                "ensemble_size": self.ensemble_size,
                "val_fraction": self.val_fraction, "master_seed": self.master_seed,
                "budget": self.budget, "inner_folds": self.inner_folds,
                "grid_size": len(self.grid) if self.grid else None,
                "grid_C": list(self.grid_C) if self.grid_C else None,
                "grid_gamma_scale": (list(self.grid_gamma_scale)
                                     if self.grid_gamma_scale else None),
                "grid_folds": self.grid_folds, "svm_tol": self.svm_tol,
                "svm_max_passes": self.svm_max_passes}


@dataclass
class CvReport:
    rows: list
    mean_accuracy: float
    std_accuracy: float
    mean_sensitivity: float
    std_sensitivity: float
    mean_specificity: float
    std_specificity: float
    n_subjects: int
    config: dict
    audit: dict

    def to_dict(self) -> dict:
        return {"protocol": "repeated-split-cv", "rows": self.rows,
                "mean_accuracy": self.mean_accuracy,
                "std_accuracy": self.std_accuracy,
                "mean_sensitivity": self.mean_sensitivity,
                "std_sensitivity": self.std_sensitivity,
                "mean_specificity": self.mean_specificity,
                "std_specificity": self.std_specificity,
                "n_subjects": self.n_subjects, "config": self.config,
                "audit": self.audit}


@dataclass
class HeldoutReport:
    rows: list
    mean_accuracy: float
    rounds: int
    ensemble_size: int
    heldout_size: int
    n_subjects: int
    config: dict
    audit: dict

    def to_dict(self) -> dict:
        return {"protocol": "heldout-ensemble", "rows": self.rows,
                "mean_accuracy": self.mean_accuracy, "rounds": self.rounds,
                "ensemble_size": self.ensemble_size,
                "heldout_size": self.heldout_size,
                "n_subjects": self.n_subjects, "config": self.config,
                "audit": self.audit}


# ---- split-level fit chain -----------------------------------------------------------


def _fit_split(Xtr, ytr, names, scope, master_seed, tag, config, fit_log, train_ids):
    """Selection -> standardization -> grid search -> SVM on one training side.

    Returns (model, selected columns, selected names, params, standardizer).
    """
    p = Xtr.shape[1]
    budget = min(config.budget, p)
    sel = forward_select(Xtr, ytr, budget=budget,
                         inner_folds=config.inner_folds,
                         seed=derive_seed(master_seed, "select", tag),
                         tol=config.svm_tol, max_passes=config.svm_max_passes)
    cols = sel.selected
    fit_log.record("selection", scope, train_ids)
    Xtr_sel = Xtr[:, cols]
    stats = standardize_fit(Xtr_sel)
    fit_log.record("standardize", scope, train_ids)
    Xtr_std = standardize_apply(Xtr_sel, stats)
    if config.grid:
        grid = config.grid
    elif config.grid_C or config.grid_gamma_scale:
        from .learn import DEFAULT_GRID_C, DEFAULT_GRID_GAMMA_SCALE, SvmParams
        cs = config.grid_C or DEFAULT_GRID_C
        gs = config.grid_gamma_scale or DEFAULT_GRID_GAMMA_SCALE
        grid = [SvmParams(C=float(c), gamma=float(g) / len(cols))
                for c in cs for g in gs]
    else:
        grid = default_grid(len(cols))
    params = grid_search(Xtr_std, ytr, grid, folds=config.grid_folds,
                         seed=derive_seed(master_seed, "grid", tag),
                         tol=config.svm_tol, max_passes=config.svm_max_passes)
    fit_log.record("grid", scope, train_ids)
    model = svm_train(Xtr_std, ytr, params,
                      tol=config.svm_tol, max_passes=config.svm_max_passes)
    fit_log.record("svm", scope, train_ids)
    sel_names = [names[i] for i in cols]
    return model, cols, sel_names, params, stats


# ---- repeated-split CV -----------------------------------------------------------------


def repeated_split_cv(features, config: CvConfig = None,
                      fit_log: FitLog = None) -> CvReport:
    """Stratified 20%-validation splits, repeated; every fitted object sees
    only the training side of its split (the feature source decides the scope
    of representation fits and logs them itself)."""
    config = config or CvConfig()
    source = _as_source(features)
    y = source.labels
    if len(np.unique(y)) < 2:
        raise errors.SingleClass("need both classes for CV")
    log = fit_log if fit_log is not None else FitLog()
    ids = source.subject_ids
    rows = []
    for r in range(config.repeats):
        tag = f"r{r:02d}"
        scope = f"split:{tag}"
        rng = derive_rng(config.master_seed, "cv", tag)
        train_idx, val_idx = stratified_split(y, config.val_fraction, rng)
        log.register(scope, [ids[i] for i in val_idx])
        Xtr, Xva, _, names = source.materialize(train_idx, val_idx, None, scope, log)
        train_ids = [ids[i] for i in train_idx]
        model, cols, sel_names, params, stats = _fit_split(
            Xtr, y[train_idx], names, scope, config.master_seed, tag,
            config, log, train_ids)
        pred, _ = svm_predict(model, standardize_apply(Xva[:, cols], stats))
        acc, sens, spec = confusion_metrics(pred, y[val_idx])
        rows.append({"repeat": r, "accuracy": acc, "sensitivity": sens,
                     "specificity": spec, "selected": sel_names,
                     "C": params.C, "gamma": params.gamma,
                     "converged": model.converged,
                     "val_ids": [ids[i] for i in val_idx]})
    accs = np.array([row["accuracy"] for row in rows])
    sens = np.array([row["sensitivity"] for row in rows])
    spes = np.array([row["specificity"] for row in rows])
    violations = log.audit()
    if violations:
        raise AssertionError(f"leakage audit failed: {violations[:3]}")
    return CvReport(rows=rows,
                    mean_accuracy=float(accs.mean()), std_accuracy=float(accs.std()),
                    mean_sensitivity=float(sens.mean()), std_sensitivity=float(sens.std()),
                    mean_specificity=float(spes.mean()), std_specificity=float(spes.std()),
                    n_subjects=source.n, config=config.echo(),
                    audit=log.summary())


# ---- heldout ensemble --------------------------------------------------------------------


def heldout_ensemble_eval(features, config: HeldoutConfig = None,
                          fit_log: FitLog = None) -> HeldoutReport:
    """Per round: remove a stratified heldout set, fit `ensemble_size`
    split-models inside the remainder, score the heldout set by majority vote
    (ties positive)."""
    config = config or HeldoutConfig()
    provider = _as_source(features)
    y = provider.labels
    n = provider.n
    if n <= config.heldout_size:
        raise errors.TooFewSamples(f"n={n} <= heldout {config.heldout_size}")
    if len(np.unique(y)) < 2:
        raise errors.SingleClass("need both classes")
    log = fit_log if fit_log is not None else FitLog()
    ids = provider.subject_ids
    rows = []
    for rnd in range(config.rounds):
        round_scope = f"round:{rnd}"
        rng = derive_rng(config.master_seed, "holdout", f"round{rnd}")
        heldout_idx = stratified_take(y, config.heldout_size, rng)
        pool_mask = np.ones(n, dtype=bool)
        pool_mask[heldout_idx] = False
        pool_idx = np.nonzero(pool_mask)[0]
        log.register(round_scope, [ids[i] for i in heldout_idx])
        source = provider.round_source(round_scope, pool_idx, heldout_idx, log)
        y_pool = y[pool_idx]
        votes = np.zeros(len(heldout_idx), dtype=np.int64)
        member_accs = []
        members_converged = True
        for m in range(config.ensemble_size):
            tag = f"m{rnd}.{m:02d}"
            scope = f"{round_scope}/split:{tag}"
            rng_m = derive_rng(config.master_seed, "holdout", f"round{rnd}",
                               f"member{m}")
            tr_local, va_local = stratified_split(y_pool, config.val_fraction, rng_m)
            train_idx = pool_idx[tr_local]
            val_idx = pool_idx[va_local]
            log.register(f"split:{tag}", [ids[i] for i in val_idx])
            Xtr, Xva, Xheld, names = source.materialize(
                train_idx, val_idx, heldout_idx, scope, log)
            train_ids = [ids[i] for i in train_idx]
            model, cols, _, params, stats = _fit_split(
                Xtr, y[train_idx], names, scope, config.master_seed, tag,
                config, log, train_ids)
            pred_va, _ = svm_predict(model, standardize_apply(Xva[:, cols], stats))
            member_accs.append(float(np.mean(pred_va == y[val_idx])))
            pred_h, _ = svm_predict(model, standardize_apply(Xheld[:, cols], stats))
            votes += pred_h.astype(np.int64)
            members_converged = members_converged and model.converged
        ens_pred = (2 * votes >= config.ensemble_size).astype(np.int8)
        acc, sens, spec = confusion_metrics(ens_pred, y[heldout_idx])
        rows.append({"round": rnd, "heldout_accuracy": acc,
                     "heldout_sensitivity": sens, "heldout_specificity": spec,
                     "mean_member_val_accuracy": float(np.mean(member_accs)),
                     "all_members_converged": members_converged,
                     "heldout_ids": [ids[i] for i in heldout_idx]})
    violations = log.audit()
    if violations:
        raise AssertionError(f"leakage audit failed: {violations[:3]}")
    accs = [row["heldout_accuracy"] for row in rows]
    return HeldoutReport(rows=rows, mean_accuracy=float(np.mean(accs)),
                         rounds=config.rounds, ensemble_size=config.ensemble_size,
                         heldout_size=config.heldout_size, n_subjects=n,
                         config=config.echo(), audit=log.summary())


# ---- cohort histograms ---------------------------------------------------------------------


@dataclass
class CohortHistograms:
    names: list
    mean_positive: np.ndarray
    mean_negative: np.ndarray
    difference: np.ndarray


def cohort_histograms(features: FeatureMatrix, labels=None) -> CohortHistograms:
    """Class means of the imaging columns and their difference (pos - neg)."""
    X = np.asarray(features.values, dtype=np.float64)
    y = np.asarray(labels if labels is not None else features.labels)
    if len(np.unique((y > 0.5).astype(int))) < 2:
        raise errors.SingleClass("need both classes for cohort comparison")
    keep = [i for i, nm in enumerate(features.names)
            if not (nm.startswith("demo/") or nm.startswith("clin/"))]
    names = [features.names[i] for i in keep]
    Xi = X[:, keep]
    pos = Xi[y > 0.5].mean(axis=0)
    neg = Xi[y <= 0.5].mean(axis=0)
    return CohortHistograms(names=names, mean_positive=pos, mean_negative=neg,
                            difference=pos - neg)


# ---- serialization ---------------------------------------------------------------------------


def _jsonify(obj):
    if isinstance(obj, dict):
        return {k: _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        obj = float(obj)
    if isinstance(obj, float):
        return None if math.isnan(obj) else obj
    if isinstance(obj, np.ndarray):
        return _jsonify(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def report_to_json(report) -> str:
    d = report.to_dict() if hasattr(report, "to_dict") else report
    return json.dumps(_jsonify(d), indent=2, sort_keys=True) + "\n"


def report_from_json(text: str) -> dict:
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise errors.UnreadableReport(str(e)) from None


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    if isinstance(v, (list, tuple)):
        return ";".join(str(x) for x in v)
    return str(v)


def rows_to_csv(rows: list, columns: list) -> str:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(c)) for c in columns))
    return "\n".join(lines) + "\n"


def cv_rows_csv(report: CvReport) -> str:
    return rows_to_csv(report.rows, ["repeat", "accuracy", "sensitivity",
                                     "specificity", "C", "gamma", "converged",
                                     "selected"])


def heldout_rows_csv(report: HeldoutReport) -> str:
    return rows_to_csv(report.rows, ["round", "heldout_accuracy",
                                     "heldout_sensitivity", "heldout_specificity",
                                     "mean_member_val_accuracy"])


def cohort_csv(h: CohortHistograms) -> str:
    lines = ["name,mean_positive,mean_negative,difference"]
    for i, nm in enumerate(h.names):
        lines.append(f"{nm},{h.mean_positive[i]!r},{h.mean_negative[i]!r},"
                     f"{h.difference[i]!r}")
    return "\n".join(lines) + "\n"
