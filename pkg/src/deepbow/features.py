"""Subject-level feature assembly, the region-mean baseline, standardization,
and the CSV interchange format.

Naming scheme (stable across runs): imaging columns are
"<region>/<metric>/bin<ii>" (or "<region>/stacked/bin<ii>" for stacked
codebooks, "<region>/<metric>/mean" for the baseline), then "demo/age",
"demo/sex", then "clin/<score>". Region "thalamus" abbreviates to "thal" in
column names; assembly order is cc metrics, thalamus metrics, demographics,
clinical.
"""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import errors
from .dataio import CLINICAL_NAMES, SubjectRecord

REGION_ALIAS = {"thalamus": "thal"}

DEMO_NAMES = ["demo/age", "demo/sex"]

_STD_FLOOR = 1e-12


def region_label(region: str) -> str:
    return REGION_ALIAS.get(region, region)


@dataclass
class FeatureVector:
    values: np.ndarray  # (p,) float64
    names: list

    def __post_init__(self):
        if len(self.values) != len(self.names):
            raise errors.ScopeMismatch("values and names differ in length")
        if len(set(self.names)) != len(self.names):
            raise errors.ScopeMismatch("duplicate feature names")


@dataclass
class FeatureMatrix:
    values: np.ndarray  # (n, p) float64
    names: list
    labels: np.ndarray  # (n,) int8, 1 = positive
    subject_ids: list

    def __post_init__(self):
        n, p = self.values.shape
        if len(self.names) != p or len(self.labels) != n or len(self.subject_ids) != n:
            raise errors.ScopeMismatch("feature matrix pieces disagree in shape")

    @property
    def n_imaging(self) -> int:
        return sum(1 for nm in self.names if not nm.startswith(("demo/", "clin/")))


def expected_scopes(metric_config: dict, scenario: str) -> list:
    if scenario == "per-metric":
        return [(r, m) for r, ms in metric_config.items() for m in ms]
    if scenario == "stacked":
        return [(r, "stacked") for r in metric_config]
    raise errors.ScopeMismatch(f"unknown scenario {scenario!r}")


def assemble_features(histograms: dict, demographics, clinical,
                      metric_config: dict, scenario: str = "per-metric") -> FeatureVector:
    """Concatenate per-scope histograms + tabular values into one vector.

    histograms maps scope tuples (region, metric | "stacked") to BowHistogram;
    the scopes must cover expected_scopes(metric_config, scenario) exactly.
    """
    want = expected_scopes(metric_config, scenario)
    have = set(histograms.keys())
    if have != set(want):
        missing = sorted(set(want) - have)
        extra = sorted(have - set(want))
        raise errors.ScopeMismatch(f"missing scopes {missing}, unexpected {extra}")
    values, names = [], []
    for scope in want:
        region, metric = scope
        h = histograms[scope]
        values.append(np.asarray(h.bins, dtype=np.float64))
        names.extend(f"{region_label(region)}/{metric}/bin{i:02d}"
                     for i in range(len(h.bins)))
    demo = np.asarray(demographics, dtype=np.float64)
    clin = np.asarray(clinical, dtype=np.float64)
    if demo.shape != (2,) or clin.shape != (4,):
        raise errors.ScopeMismatch("expected 2 demographic and 4 clinical values")
    values.append(demo)
    names.extend(DEMO_NAMES)
    values.append(clin)
    names.extend(f"clin/{c}" for c in CLINICAL_NAMES)
    return FeatureVector(values=np.concatenate(values), names=names)


def region_mean_features(subject: SubjectRecord, metric_config: dict) -> FeatureVector:
    """13 in-mask means + 2 demographic + 4 clinical = 19 features."""
    values, names = [], []
    for region, metrics in metric_config.items():
        vols = subject.regions.get(region)
        if vols is None:
            raise errors.MissingVolume(f"subject {subject.id}: region {region}")
        for m in metrics:
            if m not in vols:
                raise errors.MissingVolume(f"subject {subject.id}: {region}/{m}")
            v = vols[m]
            sel = v.mask > 0
            values.append(float(v.values[sel].mean(dtype=np.float64)))
            names.append(f"{region_label(region)}/{m}/mean")
    values.extend(float(x) for x in subject.demographics)
    names.extend(DEMO_NAMES)
    values.extend(float(x) for x in subject.clinical)
    names.extend(f"clin/{c}" for c in CLINICAL_NAMES)
    return FeatureVector(values=np.array(values), names=names)


def matrix_from_vectors(vectors: list, labels, subject_ids) -> FeatureMatrix:
    names = vectors[0].names
    for v in vectors[1:]:
        if v.names != names:
            raise errors.ScopeMismatch("inconsistent feature names across subjects")
    return FeatureMatrix(values=np.stack([v.values for v in vectors]),
                         names=list(names),
                         labels=np.asarray(labels, dtype=np.int8),
                         subject_ids=list(subject_ids))


# ---- standardization ---------------------------------------------------------

@dataclass
class StandardizeParams:
    mean: np.ndarray
    std: np.ndarray            # 1.0 where constant
    constant: np.ndarray       # bool mask of constant columns


def standardize_fit(train_values: np.ndarray) -> StandardizeParams:
    x = np.asarray(train_values, dtype=np.float64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    constant = std < _STD_FLOOR
    std = np.where(constant, 1.0, std)
    return StandardizeParams(mean=mean, std=std, constant=constant)


def standardize_apply(values: np.ndarray, params: StandardizeParams) -> np.ndarray:
    z = (np.asarray(values, dtype=np.float64) - params.mean) / params.std
    z[:, params.constant] = 0.0
    return z


# ---- CSV interchange ---------------------------------------------------------

def matrix_to_csv(matrix: FeatureMatrix, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "label"] + list(matrix.names))
        for sid, label, row in zip(matrix.subject_ids, matrix.labels, matrix.values):
            w.writerow([sid, int(label)] + [repr(float(v)) for v in row])


def matrix_from_csv(path) -> FeatureMatrix:
    path = Path(path)
    if not path.exists():
        raise errors.UnreadableReport(f"feature CSV not found: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["subject_id", "label"]:
        raise errors.UnreadableReport(f"{path}: not a feature CSV")
    names = rows[0][2:]
    sids, labels, vals = [], [], []
    for row in rows[1:]:
        sids.append(row[0])
        labels.append(int(row[1]))
        vals.append([float(v) for v in row[2:]])
    return FeatureMatrix(values=np.array(vals, dtype=np.float64), names=names,
                         labels=np.asarray(labels, dtype=np.int8), subject_ids=sids)
