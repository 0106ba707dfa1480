"""Command-line interface.

Subcommands cover the stage-wise workflow (synth, extract, train-cae,
build-vocab, featurize) and the evaluation protocols (evaluate, holdout,
run, compare, report). A JSON config supplies defaults; flags win over the
config. Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
"""

import argparse
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import errors, kernels
from .dataio import (PhantomSpec, generate_phantom_dataset, load_dataset,
                     save_dataset)
from .evaluation import (FitLog, MatrixSource, cohort_csv, cohort_histograms,
                         cv_rows_csv, heldout_rows_csv, heldout_ensemble_eval,
                         repeated_split_cv, report_from_json, report_to_json)
from .features import matrix_from_csv, matrix_to_csv
from .pipeline import (BowSource, PatchConfig, RunConfig, assemble_matrix,
                       build_vectors, extract_bank, fit_codebooks,
                       fit_representation, imaging_dimension, load_bank,
                       load_representation, region_mean_matrix, run_cv,
                       run_holdout, save_bank, save_representation)
from .vocab import codebook_from_json, codebook_to_json

_TABULAR_DIM = 6
_CONFIG_KEYS = {"paths", "scenario", "family", "patch", "cae", "vocab",
                "selection", "svm", "eval", "master_seed", "strict_leakage"}


# ---- config ------------------------------------------------------------------


def load_config_file(path) -> dict:
    try:
        with open(path) as f:
            cfg = json.load(f)
    except OSError as e:
        raise errors.ConfigError(f"cannot read config: {e}") from None
    except json.JSONDecodeError as e:
        raise errors.ConfigError(f"config is not valid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise errors.ConfigError("config root must be a JSON object")
    unknown = set(cfg) - _CONFIG_KEYS
    if unknown:
        raise errors.ConfigError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def _section(cfg: dict, name: str, allowed: set) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise errors.ConfigError(f"config section {name!r} must be an object")
    unknown = set(sec) - allowed
    if unknown:
        raise errors.ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return sec


def make_run_config(cfg: dict, args) -> RunConfig:
    """Config dict + parsed flags -> validated RunConfig (flags win)."""
    patch = _section(cfg, "patch", {"size", "stride", "coverage_min"})
    cae = _section(cfg, "cae", {"widths", "latent", "latent_stacked", "epochs",
                                "batch_size", "learning_rate"})
    vocab = _section(cfg, "vocab", {"k", "tol", "max_iters"})
    sel = _section(cfg, "selection", {"budget", "inner_folds"})
    svm = _section(cfg, "svm", {"grid_C", "grid_gamma_scale", "grid_folds",
                                "tol", "max_passes"})
    ev = _section(cfg, "eval", {"protocol", "repeats", "val_fraction",
                                "heldout_size", "rounds", "ensemble_size"})
    rc = RunConfig(
        scenario=cfg.get("scenario", "per-metric"),
        family=cfg.get("family", "deep-bow"),
        words=vocab.get("k"),
        patch=PatchConfig(size=int(patch.get("size", 16)),
                          stride=int(patch.get("stride", 4)),
                          coverage_min=float(patch.get("coverage_min", 0.5))),
        stage_widths=tuple(cae.get("widths", (8, 16, 32))),
        latent_per_metric=int(cae.get("latent", 32)),
        latent_stacked=int(cae.get("latent_stacked", 64)),
        cae_epochs=int(cae.get("epochs", 10)),
        cae_batch_size=int(cae.get("batch_size", 500)),
        cae_learning_rate=float(cae.get("learning_rate", 3e-4)),
        vocab_tol=float(vocab.get("tol", 1e-6)),
        vocab_max_iters=int(vocab.get("max_iters", 300)),
        budget=int(sel.get("budget", 10)),
        inner_folds=int(sel.get("inner_folds", 3)),
        grid_C=tuple(svm["grid_C"]) if "grid_C" in svm else None,
        grid_gamma_scale=(tuple(svm["grid_gamma_scale"])
                          if "grid_gamma_scale" in svm else None),
        grid_folds=int(svm.get("grid_folds", 5)),
        svm_tol=float(svm.get("tol", 1e-3)),
        svm_max_passes=int(svm.get("max_passes", 100)),
        repeats=int(ev.get("repeats", 50)),
        val_fraction=float(ev.get("val_fraction", 0.2)),
        rounds=int(ev.get("rounds", 6)),
        heldout_size=int(ev.get("heldout_size", 20)),
        ensemble_size=int(ev.get("ensemble_size", 50)),
        master_seed=int(cfg.get("master_seed", 7)),
        strict_leakage=bool(cfg.get("strict_leakage", False)),
    )
    if getattr(args, "scenario", None):
        rc.scenario = args.scenario
    if getattr(args, "family", None):
        rc.family = args.family
    if getattr(args, "words", None) is not None:
        rc.words = int(args.words)
    if getattr(args, "seed", None) is not None:
        rc.master_seed = int(args.seed)
    if getattr(args, "strict_leakage", False):
        rc.strict_leakage = True
    rc.validate()
    return rc


class Stage:
    """Common state for one subcommand: config, paths, stage timer."""

    def __init__(self, args):
        self.args = args
        self.cfg_dict = load_config_file(args.config) if getattr(args, "config", None) else {}
        self.run_config = make_run_config(self.cfg_dict, args)
        paths = _section(self.cfg_dict, "paths", {"manifest", "out"})
        self.manifest = getattr(args, "manifest", None) or paths.get("manifest")
        self.out = Path(getattr(args, "out", None) or paths.get("out") or "out")
        self.timings = {}
        if getattr(args, "jobs", None) and kernels.BACKEND == "numba":
            import numba
            numba.set_num_threads(max(1, int(args.jobs)))

    def dataset(self):
        if not self.manifest:
            raise errors.ConfigError("no dataset manifest (flag --manifest or config paths.manifest)")
        return load_dataset(self.manifest)

    def timed(self, name, fn, *a, **kw):
        t0 = time.perf_counter()
        out = fn(*a, **kw)
        self.timings[name] = round(time.perf_counter() - t0, 3)
        return out

    def write(self, relpath, text):
        path = self.out / relpath
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            f.write(text)
        return path

    def write_meta(self):
        meta = {"config": asdict(self.run_config), "backend": kernels.BACKEND,
                "timings": self.timings}
        self.write("run_meta.json", json.dumps(_plain(meta), indent=2,
                                               sort_keys=True) + "\n")


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def _report_wrapper(stage: Stage, metric_config: dict, cv=None, holdout=None,
                    dims=None) -> dict:
    rc = stage.run_config
    if dims is None:
        img = imaging_dimension(metric_config, rc)
        dims = {"imaging": img, "total": img + _TABULAR_DIM}
    return {"family": rc.family, "scenario": rc.scenario,
            "words": None if rc.family == "region-mean" else rc.effective_words,
            "dimension": dims,
            "cv": cv.to_dict() if cv is not None else None,
            "holdout": holdout.to_dict() if holdout is not None else None,
            "config": _plain(asdict(rc))}


def _check_converged(stage: Stage, cv=None, holdout=None):
    if not getattr(stage.args, "strict", False):
        return
    bad = []
    if cv is not None:
        bad += [f"repeat {r['repeat']}" for r in cv.rows if not r["converged"]]
    if holdout is not None:
        bad += [f"round {r['round']}" for r in holdout.rows
                if not r.get("all_members_converged", True)]
    if bad:
        raise errors.NoConvergence(f"solver hit the sweep cap in: {', '.join(bad)}")


# ---- stage subcommands ----------------------------------------------------------


def cmd_synth(args) -> int:
    spec = PhantomSpec(n_subjects=args.subjects, n_patients=args.patients,
                       lesion_fraction=args.lesion_fraction,
                       effect_size=args.effect_size, seed=args.seed,
                       clinical_gap=args.clinical_gap)
    dataset = generate_phantom_dataset(spec)
    manifest = save_dataset(dataset, args.out)
    print(manifest)
    return 0


def cmd_extract(args) -> int:
    stage = Stage(args)
    dataset = stage.dataset()
    bank = stage.timed("extract", extract_bank, dataset, stage.run_config.patch)
    save_bank(bank, stage.run_config.patch, stage.out / "patches")
    n = sum(len(s) for sets in bank.values() for s in sets)
    print(f"{n} patches across {len(bank)} (region, metric) scopes -> "
          f"{stage.out / 'patches'}")
    return 0


def cmd_train_cae(args) -> int:
    stage = Stage(args)
    rc = stage.run_config
    if rc.family != "deep-bow":
        raise errors.ConfigError("train-cae applies to family deep-bow only")
    dataset = stage.dataset()
    bank, _ = load_bank(stage.out / "patches")
    rep = stage.timed("train-cae", fit_representation, dataset, bank, rc,
                      np.arange(len(dataset.subjects)), "protocol", FitLog())
    save_representation(rep, stage.out / "models")
    losses = {k: (t[0], t[-1]) for k, t in rep.traces.items() if t}
    for k, (first, last) in sorted(losses.items()):
        print(f"{k}: epoch loss {first:.6f} -> {last:.6f}")
    return 0


def cmd_build_vocab(args) -> int:
    stage = Stage(args)
    rc = stage.run_config
    if rc.family == "region-mean":
        raise errors.ConfigError("build-vocab applies to the BoW families")
    dataset = stage.dataset()
    bank, _ = load_bank(stage.out / "patches")
    rep = load_representation(stage.out / "models") if rc.family == "deep-bow" else None
    vb = build_vectors(dataset, bank, rc, rep)
    books = stage.timed("build-vocab", fit_codebooks, dataset, vb, rc)
    out = stage.out / "codebooks"
    out.mkdir(parents=True, exist_ok=True)
    for key, cb in books.items():
        with open(out / f"{key[0]}-{key[1]}.json", "w") as f:
            f.write(codebook_to_json(cb))
    print(f"{len(books)} codebooks with {rc.effective_words} words each -> {out}")
    return 0


def cmd_featurize(args) -> int:
    stage = Stage(args)
    rc = stage.run_config
    dataset = stage.dataset()
    if rc.family == "region-mean":
        matrix = region_mean_matrix(dataset)
    else:
        bank, _ = load_bank(stage.out / "patches")
        rep = load_representation(stage.out / "models") if rc.family == "deep-bow" else None
        vb = build_vectors(dataset, bank, rc, rep)
        books = {}
        for key in vb.keys:
            path = stage.out / "codebooks" / f"{key[0]}-{key[1]}.json"
            try:
                with open(path) as f:
                    cb = codebook_from_json(f.read())
            except OSError as e:
                raise errors.DataError(f"missing codebook (run build-vocab): {e}") from None
            books[key] = cb
        matrix = stage.timed("featurize", assemble_matrix, dataset, vb, books,
                             rc.scenario)
    matrix_to_csv(matrix, stage.out / "features.csv")
    stage.write("cohort.csv", cohort_csv(cohort_histograms(matrix)))
    print(f"{matrix.values.shape[0]} subjects x {matrix.values.shape[1]} features "
          f"-> {stage.out / 'features.csv'}")
    return 0


# ---- protocol subcommands ----------------------------------------------------------


def _evaluate_core(stage: Stage, protocol: str):
    """Shared by evaluate/holdout: either from a features CSV (fixed columns)
    or end-to-end from the manifest (split-scoped codebooks)."""
    rc = stage.run_config
    if getattr(stage.args, "features", None):
        matrix = matrix_from_csv(stage.args.features)
        dims = {"imaging": matrix.n_imaging, "total": matrix.values.shape[1]}
        if protocol == "cv":
            report = stage.timed("evaluate-cv", repeated_split_cv, matrix,
                                 rc.cv_config())
            return report, None, dims, None
        report = stage.timed("evaluate-holdout", heldout_ensemble_eval, matrix,
                             rc.heldout_config())
        return None, report, dims, None
    dataset = stage.dataset()
    if protocol == "cv":
        report, _ = stage.timed("evaluate-cv", run_cv, dataset, rc)
        return report, None, None, dataset
    report, _ = stage.timed("evaluate-holdout", run_holdout, dataset, rc)
    return None, report, None, dataset


def cmd_evaluate(args) -> int:
    stage = Stage(args)
    cv, _, dims, dataset = _evaluate_core(stage, "cv")
    mc = dataset.metric_config if dataset else None
    wrapper = _report_wrapper(stage, mc, cv=cv, dims=dims)
    stage.write("report.json", report_to_json(wrapper))
    stage.write("cv_rows.csv", cv_rows_csv(cv))
    stage.write_meta()
    print(f"cv mean accuracy {cv.mean_accuracy:.4f} "
          f"(sens {cv.mean_sensitivity:.4f}, spec {cv.mean_specificity:.4f}) "
          f"over {len(cv.rows)} repeats -> {stage.out / 'report.json'}")
    _check_converged(stage, cv=cv)
    return 0


def cmd_holdout(args) -> int:
    stage = Stage(args)
    _, held, dims, dataset = _evaluate_core(stage, "holdout")
    mc = dataset.metric_config if dataset else None
    wrapper = _report_wrapper(stage, mc, holdout=held, dims=dims)
    stage.write("report.json", report_to_json(wrapper))
    stage.write("holdout_rows.csv", heldout_rows_csv(held))
    stage.write_meta()
    print(f"heldout mean accuracy {held.mean_accuracy:.4f} over "
          f"{held.rounds} rounds of {held.ensemble_size}-model ensembles "
          f"-> {stage.out / 'report.json'}")
    _check_converged(stage, holdout=held)
    return 0


def cmd_run(args) -> int:
    """Full sequence: extract -> (train) -> vocab/featurize -> evaluate."""
    stage = Stage(args)
    rc = stage.run_config
    dataset = stage.timed("load", stage.dataset)
    protocol = _section(stage.cfg_dict, "eval", {"protocol", "repeats",
                                                 "val_fraction", "heldout_size",
                                                 "rounds", "ensemble_size"}
                        ).get("protocol", "cv")
    if getattr(args, "protocol", None):
        protocol = args.protocol
    if protocol not in ("cv", "holdout", "both"):
        raise errors.ConfigError(f"eval.protocol must be cv|holdout|both, got {protocol!r}")

    cv_log = FitLog()
    if rc.family == "region-mean":
        matrix = stage.timed("featurize", region_mean_matrix, dataset)
        source = MatrixSource(matrix)
    else:
        bank = stage.timed("extract", extract_bank, dataset, rc.patch)
        rep = None
        if rc.family == "deep-bow":
            rep = stage.timed("train-cae", fit_representation, dataset, bank,
                              rc, np.arange(len(dataset.subjects)), "protocol",
                              cv_log)
        t0 = time.perf_counter()
        vb = build_vectors(dataset, bank, rc, rep)
        books = fit_codebooks(dataset, vb, rc)
        matrix = assemble_matrix(dataset, vb, books, rc.scenario)
        stage.timings["featurize"] = round(time.perf_counter() - t0, 3)
        source = BowSource(dataset, bank, rc, vector_bank=vb)
    matrix_to_csv(matrix, stage.out / "features.csv")
    stage.write("cohort.csv", cohort_csv(cohort_histograms(matrix)))

    cv = held = None
    if protocol in ("cv", "both"):
        cv = stage.timed("evaluate-cv", repeated_split_cv, source,
                         rc.cv_config(), cv_log)
        stage.write("cv_rows.csv", cv_rows_csv(cv))
    if protocol in ("holdout", "both"):
        held = stage.timed("evaluate-holdout", heldout_ensemble_eval, source,
                           rc.heldout_config(), FitLog())
        stage.write("holdout_rows.csv", heldout_rows_csv(held))
    wrapper = _report_wrapper(stage, dataset.metric_config, cv=cv, holdout=held)
    stage.write("report.json", report_to_json(wrapper))
    stage.write_meta()
    if cv is not None:
        print(f"cv mean accuracy {cv.mean_accuracy:.4f} over {len(cv.rows)} repeats")
    if held is not None:
        print(f"heldout mean accuracy {held.mean_accuracy:.4f} over {held.rounds} rounds")
    print(f"reports -> {stage.out}")
    _check_converged(stage, cv=cv, holdout=held)
    return 0


# ---- reporting subcommands -----------------------------------------------------------


def _load_wrapper(path) -> dict:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise errors.UnreadableReport(f"{path}: {e}") from None
    d = report_from_json(text)
    if not isinstance(d, dict) or "family" not in d:
        raise errors.UnreadableReport(f"{path}: not a report file")
    return d


def _table_text(headers, rows) -> str:
    cols = [headers] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cols) for i in range(len(headers))]
    lines = []
    for j, row in enumerate(cols):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def cmd_compare(args) -> int:
    if len(args.reports) < 2:
        raise errors.ConfigError("compare needs at least 2 report files")
    rows = []
    for path in args.reports:
        d = _load_wrapper(path)
        cv = d.get("cv") or {}
        held = d.get("holdout") or {}

        def f(v):
            return "" if v is None else f"{v:.4f}"
        rows.append({
            "family": d.get("family", ""),
            "scenario": d.get("scenario", ""),
            "dimension": (d.get("dimension") or {}).get("total", ""),
            "cv_accuracy": f(cv.get("mean_accuracy")),
            "cv_sensitivity": f(cv.get("mean_sensitivity")),
            "cv_specificity": f(cv.get("mean_specificity")),
            "heldout_accuracy": f(held.get("mean_accuracy")),
            "_sort": cv.get("mean_accuracy") if cv.get("mean_accuracy") is not None
                     else float("-inf"),
        })
    rows.sort(key=lambda r: -r["_sort"])
    headers = ["family", "scenario", "dimension", "cv_accuracy",
               "cv_sensitivity", "cv_specificity", "heldout_accuracy"]
    table = [[r[h] for h in headers] for r in rows]
    text = _table_text(headers, table)
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        csv = ",".join(headers) + "\n" + "\n".join(
            ",".join(str(c) for c in row) for row in table) + "\n"
        with open(out / "comparison.csv", "w") as fh:
            fh.write(csv)
        with open(out / "comparison.txt", "w") as fh:
            fh.write(text)
    return 0


def cmd_report(args) -> int:
    d = _load_wrapper(args.report)
    print(f"family:    {d.get('family')}")
    print(f"scenario:  {d.get('scenario')}")
    dim = d.get("dimension") or {}
    print(f"dimension: {dim.get('total')} total ({dim.get('imaging')} imaging)")
    cv = d.get("cv")
    if cv:
        print(f"cv:        {cv['mean_accuracy']:.4f} accuracy "
              f"(+/- {cv['std_accuracy']:.4f}), "
              f"{cv['mean_sensitivity']:.4f} sensitivity, "
              f"{cv['mean_specificity']:.4f} specificity, "
              f"{len(cv['rows'])} repeats")
    held = d.get("holdout")
    if held:
        print(f"heldout:   {held['mean_accuracy']:.4f} accuracy over "
              f"{held['rounds']} rounds, ensemble {held['ensemble_size']}")
    return 0


# ---- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--manifest", help="dataset manifest path")
    common.add_argument("--out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, help="master seed override")
    common.add_argument("--jobs", type=int, help="worker thread cap")
    common.add_argument("--family", choices=["deep-bow", "raw-bow", "region-mean"])
    common.add_argument("--scenario", choices=["per-metric", "stacked"])
    common.add_argument("--words", type=int, help="codebook size override")
    common.add_argument("--strict", action="store_true",
                        help="escalate solver non-convergence to exit 4")
    common.add_argument("--strict-leakage", action="store_true",
                        help="refit normalization and auto-encoders inside every split")

    p = argparse.ArgumentParser(prog="deepbow",
                                description="Deep bag-of-words region classification pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    sp.add_argument("--subjects", type=int, default=114)
    sp.add_argument("--patients", type=int, default=70)
    sp.add_argument("--seed", type=int, default=7)
    sp.add_argument("--effect-size", type=float, default=0.6)
    sp.add_argument("--lesion-fraction", type=float, default=0.35)
    sp.add_argument("--clinical-gap", type=float, default=0.0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    for name, fn, desc in [
            ("extract", cmd_extract, "extract masked patches into a bank"),
            ("train-cae", cmd_train_cae, "train the auto-encoders on the patch bank"),
            ("build-vocab", cmd_build_vocab, "fit codebooks over patch descriptors"),
            ("featurize", cmd_featurize, "emit the feature matrix and cohort histograms")]:
        sp = sub.add_parser(name, parents=[common], help=desc)
        sp.set_defaults(func=fn)

    sp = sub.add_parser("evaluate", parents=[common],
                        help="repeated stratified-split CV")
    sp.add_argument("--features", help="precomputed features CSV (fixed columns)")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("holdout", parents=[common],
                        help="heldout ensemble protocol")
    sp.add_argument("--features", help="precomputed features CSV (fixed columns)")
    sp.set_defaults(func=cmd_holdout)

    sp = sub.add_parser("run", parents=[common],
                        help="full pipeline: extract to reports")
    sp.add_argument("--protocol", choices=["cv", "holdout", "both"])
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("compare", help="tabulate several report files")
    sp.add_argument("reports", nargs="+")
    sp.add_argument("--out", help="directory for comparison.csv/.txt")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("report", help="print a report file summary")
    sp.add_argument("report")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except errors.DeepBowError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
