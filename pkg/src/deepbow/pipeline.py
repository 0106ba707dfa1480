"""End-to-end assembly: patch banks, representation fitting (normalization +
auto-encoders), per-subject visual-word vector pools, feature sources for the
evaluation protocols, and the CV / heldout orchestrators.

Three feature families share the protocol machinery:
  deep-bow    patches -> z-score -> auto-encoder latents -> k-means words
  raw-bow     patches -> raw pixel vectors -> k-means words
  region-mean in-mask mean per (region, metric) plus tabular columns

Representation scope policy: codebooks, standardizers, selection, and SVMs
are always fit strictly inside each split's training side. Normalization and
auto-encoders are fit per protocol run (CV) or per round on the non-heldout
pool (heldout protocol); `strict_leakage` moves them inside every split too.
"""

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import errors
from .cae import (CaeArch, TrainConfig, encode, init_model, model_from_json,
                  model_to_json, train)
from .dataio import Dataset
from .evaluation import (CvConfig, CvReport, FitLog, HeldoutConfig,
                         HeldoutReport, MatrixSource, heldout_ensemble_eval,
                         repeated_split_cv)
from .features import (FeatureMatrix, assemble_features, expected_scopes,
                       matrix_from_vectors, region_mean_features)
from .patches import (NormStats, PatchSet, apply_norm, concat_sets,
                      extract_patches, fit_norm, stack_metrics)
from .seeding import derive_seed
from .vocab import histogram_from_words, kmeans_fit, quantize_batch

FAMILIES = ("deep-bow", "raw-bow", "region-mean")
SCENARIOS = ("per-metric", "stacked")
_ENCODE_CHUNK = 512


@dataclass
class PatchConfig:
    size: int = 16
    stride: int = 4
    coverage_min: float = 0.5


@dataclass
class RunConfig:
    scenario: str = "per-metric"
    family: str = "deep-bow"
    words: int = None                 # None -> 20 per-metric, 130 stacked
    patch: PatchConfig = field(default_factory=PatchConfig)
    stage_widths: tuple = (8, 16, 32)
    latent_per_metric: int = 32
    latent_stacked: int = 64
    cae_epochs: int = 10
    cae_batch_size: int = 500
    cae_learning_rate: float = 3e-4
    vocab_tol: float = 1e-6
    vocab_max_iters: int = 300
    budget: int = 10
    inner_folds: int = 3
    grid_C: tuple = None
    grid_gamma_scale: tuple = None
    grid_folds: int = 5
    svm_tol: float = 1e-3
    svm_max_passes: int = 100
    repeats: int = 50
    val_fraction: float = 0.2
    rounds: int = 6
    heldout_size: int = 20
    ensemble_size: int = 50
    master_seed: int = 7
    strict_leakage: bool = False

    def validate(self):
        if self.scenario not in SCENARIOS:
            raise errors.ConfigError(f"scenario must be one of {SCENARIOS}")
        if self.family not in FAMILIES:
            raise errors.ConfigError(f"family must be one of {FAMILIES}")

    @property
    def effective_words(self) -> int:
        if self.words is not None:
            return int(self.words)
        return 20 if self.scenario == "per-metric" else 130

    def cv_config(self) -> CvConfig:
        return CvConfig(repeats=self.repeats, val_fraction=self.val_fraction,
                        master_seed=self.master_seed, budget=self.budget,
                        inner_folds=self.inner_folds, grid=None,
                        grid_C=self.grid_C,
                        grid_gamma_scale=self.grid_gamma_scale,
                        grid_folds=self.grid_folds, svm_tol=self.svm_tol,
                        svm_max_passes=self.svm_max_passes)

    def heldout_config(self) -> HeldoutConfig:
        return HeldoutConfig(rounds=self.rounds, heldout_size=self.heldout_size,
                             ensemble_size=self.ensemble_size,
                             val_fraction=self.val_fraction,
                             master_seed=self.master_seed, budget=self.budget,
                             inner_folds=self.inner_folds, grid=None,
                             grid_C=self.grid_C,
                             grid_gamma_scale=self.grid_gamma_scale,
                             grid_folds=self.grid_folds, svm_tol=self.svm_tol,
                             svm_max_passes=self.svm_max_passes)


# ---- patch banks ---------------------------------------------------------------


def extract_bank(dataset: Dataset, patch: PatchConfig) -> dict:
    """(region, metric) -> per-subject PatchSet list, dataset order."""
    bank = {}
    for region, metrics in dataset.metric_config.items():
        for m in metrics:
            sets = []
            for s in dataset.subjects:
                sets.append(extract_patches(
                    s.regions[region][m], size=patch.size, stride=patch.stride,
                    coverage_min=patch.coverage_min, subject_id=s.id,
                    region=region, metric_group=m))
            bank[(region, m)] = sets
    return bank


def stack_bank(dataset: Dataset, bank: dict) -> dict:
    """(region, 'stacked') -> per-subject multichannel PatchSet list."""
    out = {}
    for region, metrics in dataset.metric_config.items():
        per_subject = []
        for i in range(len(dataset.subjects)):
            per_subject.append(stack_metrics([bank[(region, m)][i] for m in metrics]))
        out[(region, "stacked")] = per_subject
    return out


def _metric_union(metric_config: dict) -> list:
    seen = []
    for metrics in metric_config.values():
        for m in metrics:
            if m not in seen:
                seen.append(m)
    return seen


# ---- representation (normalization + auto-encoders) ----------------------------------


@dataclass
class Representation:
    scenario: str
    norm: dict    # key -> NormStats; key = metric (per-metric) or region (stacked)
    models: dict  # key -> AutoEncoderModel
    scope: str
    traces: dict  # key -> per-epoch loss list


def _train_cae(pooled: PatchSet, in_channels: int, latent: int, cfg: RunConfig,
               scope: str, key: str):
    arch = CaeArch(input_size=cfg.patch.size, in_channels=in_channels,
                   widths=tuple(cfg.stage_widths) + (latent,))
    model = init_model(arch, seed=derive_seed(cfg.master_seed, "cae", scope, key))
    tc = TrainConfig(epochs=cfg.cae_epochs, batch_size=cfg.cae_batch_size,
                     learning_rate=cfg.cae_learning_rate,
                     shuffle_seed=derive_seed(cfg.master_seed, "cae-shuffle",
                                              scope, key))
    return train(model, pooled, tc)


def fit_representation(dataset: Dataset, bank: dict, cfg: RunConfig,
                       train_idx, scope: str, fit_log: FitLog) -> Representation:
    """Fit per-channel z-scoring and the auto-encoders on the given subjects.

    Per-metric scenario: one model per metric, pooled over every region that
    carries it. Stacked scenario: one model per region over channel-stacked
    patches.
    """
    train_idx = np.asarray(train_idx)
    ids = [dataset.subjects[i].id for i in train_idx]
    norm, models, traces = {}, {}, {}
    if cfg.scenario == "per-metric":
        for m in _metric_union(dataset.metric_config):
            sets = [bank[(r, m)][i]
                    for r, ms in dataset.metric_config.items() if m in ms
                    for i in train_idx]
            pooled = concat_sets(sets)
            norm[m] = fit_norm(pooled)
            fit_log.record("norm", scope, ids)
            models[m], traces[m] = _train_cae(
                apply_norm(pooled, norm[m]), 1, cfg.latent_per_metric,
                cfg, scope, m)
            fit_log.record("cae", scope, ids)
    else:
        stacked = stack_bank(dataset, bank)
        for region, metrics in dataset.metric_config.items():
            pooled = concat_sets([stacked[(region, "stacked")][i] for i in train_idx])
            norm[region] = fit_norm(pooled)
            fit_log.record("norm", scope, ids)
            models[region], traces[region] = _train_cae(
                apply_norm(pooled, norm[region]), len(metrics),
                cfg.latent_stacked, cfg, scope, region)
            fit_log.record("cae", scope, ids)
    return Representation(scenario=cfg.scenario, norm=norm, models=models,
                          scope=scope, traces=traces)


def _encode_chunks(model, values: np.ndarray) -> np.ndarray:
    outs = []
    for lo in range(0, values.shape[0], _ENCODE_CHUNK):
        outs.append(encode(model, values[lo:lo + _ENCODE_CHUNK]))
    return np.concatenate(outs, axis=0)


# ---- per-subject vector pools ----------------------------------------------------------


@dataclass
class VectorBank:
    keys: list     # scope keys, expected_scopes order
    vectors: dict  # key -> (N, d) float64
    spans: dict    # key -> {subject_id: (start, stop)}


def build_vectors(dataset: Dataset, bank: dict, cfg: RunConfig,
                  representation: Representation = None) -> VectorBank:
    """Per-patch descriptor pools per scope: auto-encoder latents when a
    representation is given (deep family), raw pixels otherwise."""
    keys = expected_scopes(dataset.metric_config, cfg.scenario)
    source = bank if cfg.scenario == "per-metric" else stack_bank(dataset, bank)
    vectors, spans = {}, {}
    for key in keys:
        region, metric = key
        rep_key = metric if cfg.scenario == "per-metric" else region
        rows, span, pos = [], {}, 0
        for i, subj in enumerate(dataset.subjects):
            ps = source[key][i]
            if representation is not None:
                ps = apply_norm(ps, representation.norm[rep_key])
                vec = _encode_chunks(representation.models[rep_key], ps.values)
            else:
                vec = ps.flat()
            vec = np.asarray(vec, dtype=np.float64)
            rows.append(vec)
            span[subj.id] = (pos, pos + vec.shape[0])
            pos += vec.shape[0]
        vectors[key] = np.concatenate(rows, axis=0)
        spans[key] = span
    return VectorBank(keys=keys, vectors=vectors, spans=spans)


# ---- stage artifacts ---------------------------------------------------------------------


def _key_label(key) -> str:
    return f"{key[0]}-{key[1]}"


def save_bank(bank: dict, patch: PatchConfig, out_dir) -> None:
    """Patch bank as .npy pairs plus an index with per-subject row counts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = {"patch": {"size": patch.size, "stride": patch.stride,
                       "coverage_min": patch.coverage_min}, "keys": []}
    for key, sets in bank.items():
        label = _key_label(key)
        pooled = concat_sets(sets)
        np.save(out / f"{label}.values.npy", pooled.values)
        np.save(out / f"{label}.origins.npy", pooled.origins)
        index["keys"].append({"region": key[0], "metric": key[1],
                              "subjects": [s.subject_ids[0] for s in sets],
                              "counts": [len(s) for s in sets]})
    with open(out / "index.json", "w") as f:
        json.dump(index, f, indent=2, sort_keys=True)


def load_bank(in_dir):
    """(bank, PatchConfig) back from save_bank output."""
    src = Path(in_dir)
    try:
        with open(src / "index.json") as f:
            index = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise errors.DataError(f"unreadable patch bank index: {e}") from None
    patch = PatchConfig(**index["patch"])
    bank = {}
    for entry in index["keys"]:
        key = (entry["region"], entry["metric"])
        label = _key_label(key)
        values = np.load(src / f"{label}.values.npy")
        origins = np.load(src / f"{label}.origins.npy")
        sets, pos = [], 0
        for sid, cnt in zip(entry["subjects"], entry["counts"]):
            sl = slice(pos, pos + cnt)
            sets.append(PatchSet(
                size=patch.size, channels=values.shape[3],
                values=values[sl], origins=origins[sl],
                subject_ids=np.array([sid] * cnt, dtype=object),
                region=key[0], metric_group=key[1]))
            pos += cnt
        bank[key] = sets
    return bank, patch


def save_representation(rep: Representation, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    keys = sorted(rep.models)
    meta = {"scenario": rep.scenario, "scope": rep.scope, "keys": keys}
    with open(out / "index.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    for key in keys:
        payload = {"norm": {"mean": rep.norm[key].mean.tolist(),
                            "std": rep.norm[key].std.tolist()},
                   "trace": rep.traces.get(key, []),
                   "model": json.loads(model_to_json(rep.models[key]))}
        with open(out / f"{key}.json", "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)


def load_representation(in_dir) -> Representation:
    src = Path(in_dir)
    try:
        with open(src / "index.json") as f:
            meta = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise errors.DataError(f"unreadable model index: {e}") from None
    norm, models, traces = {}, {}, {}
    for key in meta["keys"]:
        with open(src / f"{key}.json") as f:
            payload = json.load(f)
        norm[key] = NormStats(mean=np.array(payload["norm"]["mean"], dtype=np.float64),
                              std=np.array(payload["norm"]["std"], dtype=np.float64))
        models[key] = model_from_json(json.dumps(payload["model"]))
        traces[key] = payload.get("trace", [])
    return Representation(scenario=meta["scenario"], norm=norm, models=models,
                          scope=meta["scope"], traces=traces)


# ---- feature sources ---------------------------------------------------------------------


def region_mean_matrix(dataset: Dataset) -> FeatureMatrix:
    vecs = [region_mean_features(s, dataset.metric_config) for s in dataset.subjects]
    return matrix_from_vectors(vecs, dataset.labels, dataset.subject_ids)


class BowSource:
    """Feature source that fits one codebook per scope on each split's
    training vectors, then emits histogram + tabular matrices.

    For the deep family the descriptor pool comes from a representation whose
    scope the caller controls: pass a prebuilt `vector_bank` (protocol or
    round scope), or set strict_leakage to refit it inside every split.
    """

    def __init__(self, dataset: Dataset, bank: dict, cfg: RunConfig,
                 vector_bank: VectorBank = None):
        self.dataset = dataset
        self.bank = bank
        self.cfg = cfg
        self.labels = dataset.labels
        self.subject_ids = dataset.subject_ids
        self.n = len(dataset.subjects)
        self._vector_bank = vector_bank
        if cfg.family == "raw-bow" and vector_bank is None:
            self._vector_bank = build_vectors(dataset, bank, cfg, None)

    def _split_bank(self, train_idx, scope, fit_log) -> VectorBank:
        if self.cfg.family == "deep-bow" and self.cfg.strict_leakage:
            rep = fit_representation(self.dataset, self.bank, self.cfg,
                                     train_idx, scope, fit_log)
            return build_vectors(self.dataset, self.bank, self.cfg, rep)
        if self._vector_bank is None:
            raise errors.ScopeMismatch(
                "no descriptor pool bound; use round_source or strict_leakage")
        return self._vector_bank

    def materialize(self, train_idx, val_idx, heldout_idx, scope, fit_log):
        cfg = self.cfg
        vb = self._split_bank(train_idx, scope, fit_log)
        k = cfg.effective_words
        train_ids = [self.subject_ids[i] for i in train_idx]
        groups = [np.asarray(train_idx), np.asarray(val_idx)]
        if heldout_idx is not None:
            groups.append(np.asarray(heldout_idx))
        needed = np.unique(np.concatenate(groups))

        hists = {int(i): {} for i in needed}
        for key in vb.keys:
            vecs = vb.vectors[key]
            spans = vb.spans[key]
            take = np.concatenate([np.arange(*spans[self.subject_ids[i]])
                                   for i in train_idx])
            cb = kmeans_fit(vecs[take], k,
                            seed=derive_seed(cfg.master_seed, "kmeans", scope,
                                             f"{key[0]}/{key[1]}"),
                            max_iters=cfg.vocab_max_iters, tol=cfg.vocab_tol)
            cb = replace(cb, scope=key)
            fit_log.record("codebook", scope, train_ids)
            for i in needed:
                a, b = spans[self.subject_ids[int(i)]]
                words = quantize_batch(cb, vecs[a:b])
                hists[int(i)][key] = histogram_from_words(cb, words, scope=key)

        feats = {}
        names = None
        for i in needed:
            s = self.dataset.subjects[int(i)]
            fv = assemble_features(hists[int(i)], s.demographics, s.clinical,
                                   self.dataset.metric_config, cfg.scenario)
            feats[int(i)] = fv.values
            names = fv.names
        def stack(idx):
            return np.stack([feats[int(i)] for i in idx])
        held = stack(heldout_idx) if heldout_idx is not None else None
        return stack(train_idx), stack(val_idx), held, names

    def round_source(self, scope, pool_idx, heldout_idx, fit_log):
        if self.cfg.family != "deep-bow" or self.cfg.strict_leakage:
            return self
        rep = fit_representation(self.dataset, self.bank, self.cfg,
                                 pool_idx, scope, fit_log)
        vb = build_vectors(self.dataset, self.bank, self.cfg, rep)
        return BowSource(self.dataset, self.bank, self.cfg, vector_bank=vb)


def build_source(dataset: Dataset, cfg: RunConfig, fit_log: FitLog,
                 protocol: str = "cv"):
    """Feature source for one protocol run.

    protocol "cv": deep-family representation fits once now, scope
    "protocol" (unless strict). protocol "holdout": representation fitting
    deferred to round_source.
    """
    cfg.validate()
    if cfg.family == "region-mean":
        return MatrixSource(region_mean_matrix(dataset))
    bank = extract_bank(dataset, cfg.patch)
    vb = None
    if cfg.family == "deep-bow" and not cfg.strict_leakage and protocol == "cv":
        rep = fit_representation(dataset, bank, cfg, np.arange(len(dataset.subjects)),
                                 "protocol", fit_log)
        vb = build_vectors(dataset, bank, cfg, rep)
    return BowSource(dataset, bank, cfg, vector_bank=vb)


# ---- protocol-scope featurization (stage-wise workflow) -----------------------------------


def fit_codebooks(dataset: Dataset, vb: VectorBank, cfg: RunConfig,
                  scope: str = "protocol", fit_log: FitLog = None,
                  train_idx=None) -> dict:
    """One codebook per scope key over the given subjects' descriptors."""
    idx = np.arange(len(dataset.subjects)) if train_idx is None else np.asarray(train_idx)
    ids = [dataset.subjects[i].id for i in idx]
    out = {}
    for key in vb.keys:
        spans = vb.spans[key]
        take = np.concatenate([np.arange(*spans[dataset.subjects[i].id])
                               for i in idx])
        cb = kmeans_fit(vb.vectors[key][take], cfg.effective_words,
                        seed=derive_seed(cfg.master_seed, "kmeans", scope,
                                         f"{key[0]}/{key[1]}"),
                        max_iters=cfg.vocab_max_iters, tol=cfg.vocab_tol)
        out[key] = replace(cb, scope=key)
        if fit_log is not None:
            fit_log.record("codebook", scope, ids)
    return out


def assemble_matrix(dataset: Dataset, vb: VectorBank, codebooks: dict,
                    scenario: str) -> FeatureMatrix:
    """Histogram + tabular feature matrix for every subject."""
    vecs = []
    for subj in dataset.subjects:
        hists = {}
        for key in vb.keys:
            a, b = vb.spans[key][subj.id]
            words = quantize_batch(codebooks[key], vb.vectors[key][a:b])
            hists[key] = histogram_from_words(codebooks[key], words, scope=key)
        vecs.append(assemble_features(hists, subj.demographics, subj.clinical,
                                      dataset.metric_config, scenario))
    return matrix_from_vectors(vecs, dataset.labels, dataset.subject_ids)


def imaging_dimension(metric_config: dict, cfg: RunConfig) -> int:
    if cfg.family == "region-mean":
        return sum(len(ms) for ms in metric_config.values())
    return len(expected_scopes(metric_config, cfg.scenario)) * cfg.effective_words


# ---- orchestrators ----------------------------------------------------------------------


def run_cv(dataset: Dataset, cfg: RunConfig):
    """(CvReport, FitLog) for one family under the repeated-split protocol."""
    fit_log = FitLog()
    source = build_source(dataset, cfg, fit_log, protocol="cv")
    report = repeated_split_cv(source, cfg.cv_config(), fit_log)
    return report, fit_log


def run_holdout(dataset: Dataset, cfg: RunConfig):
    """(HeldoutReport, FitLog) for one family under the heldout protocol."""
    fit_log = FitLog()
    source = build_source(dataset, cfg, fit_log, protocol="holdout")
    report = heldout_ensemble_eval(source, cfg.heldout_config(), fit_log)
    return report, fit_log
