"""Timings for the dispatched kernels under both backends.

Runs itself twice as a subprocess, once with DEEPBOW_DISABLE_NUMBA=1 and once
without, then prints a side-by-side table. Workloads are seeded so both
backends see identical inputs.

Usage: python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def _conv_inputs(seed=3):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(256, 16, 16, 8)).astype(np.float32)
    w = (rng.normal(size=(3, 3, 8, 16)) * 0.1).astype(np.float32)
    b = np.zeros(16, dtype=np.float32)
    dy = rng.normal(size=(256, 16, 16, 16)).astype(np.float32)
    return x, w, b, dy


def _assign_inputs(seed=4):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(20000, 32)), rng.normal(size=(130, 32))


def _smo_inputs(seed=7):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(200, 10))
    y = np.where(np.arange(200) % 2 == 0, 1.0, -1.0)
    X[y > 0] += 0.5
    sq = ((X[:, None, :] - X[None, :, :]) ** 2).sum(axis=2)
    return np.ascontiguousarray(np.exp(-0.05 * sq)), y


def _select_inputs(n=90, p=40, folds=3, seed=5):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    y = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    X[y > 0, 0] += 1.0
    fold = (np.arange(n) // 2) % folds   # pair blocks keep classes balanced
    diffs = X[:, None, :] - X[None, :, :]
    D = np.ascontiguousarray((diffs * diffs).transpose(2, 0, 1), dtype=np.float32)
    tmax = max(int(np.sum(fold != f)) for f in range(folds))
    vmax = max(int(np.sum(fold == f)) for f in range(folds))
    tr_idx = np.zeros((folds, tmax), dtype=np.int64)
    va_idx = np.zeros((folds, vmax), dtype=np.int64)
    tr_len = np.zeros(folds, dtype=np.int64)
    va_len = np.zeros(folds, dtype=np.int64)
    inv_var = np.zeros((folds, p), dtype=np.float64)
    for f in range(folds):
        tr = np.nonzero(fold != f)[0]
        va = np.nonzero(fold == f)[0]
        tr_idx[f, :len(tr)] = tr
        va_idx[f, :len(va)] = va
        tr_len[f], va_len[f] = len(tr), len(va)
        inv_var[f] = 1.0 / X[tr].var(axis=0)
    base = np.zeros((folds, n, n), dtype=np.float64)
    cand = np.arange(p, dtype=np.int64)
    return (D, base, cand, tr_idx, tr_len, va_idx, va_len, inv_var, y,
            1.0, 1.0, 1e-3, 100)


def _time(fn, repeats):
    fn()   # warmup; first numba call includes JIT compilation
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_worker(repeats):
    from deepbow import kernels

    x, w, b, dy = _conv_inputs()
    K, ysmo = _smo_inputs()
    pts, cents = _assign_inputs()
    sel = _select_inputs()
    cases = {
        "conv3x3_forward": lambda: kernels.conv3x3_forward(x, w, b),
        "conv3x3_backward_input": lambda: kernels.conv3x3_backward_input(dy, w),
        "conv3x3_backward_params": lambda: kernels.conv3x3_backward_params(x, dy),
        "assign_nearest_loop": lambda: kernels.assign_nearest_loop(pts, cents),
        "smo_solve": lambda: kernels.smo_solve(K, ysmo, 1.0, 1e-3, 100),
        "select_sweep": lambda: kernels.select_sweep(*sel),
    }
    out = {"backend": kernels.BACKEND,
           "times": {name: _time(fn, repeats) for name, fn in cases.items()}}
    json.dump(out, sys.stdout)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.worker:
        run_worker(args.repeats)
        return

    results = {}
    for backend, flag in [("numpy", "1"), ("numba", "")]:
        env = dict(os.environ)
        env.pop("DEEPBOW_DISABLE_NUMBA", None)
        if flag:
            env["DEEPBOW_DISABLE_NUMBA"] = flag
        proc = subprocess.run(
            [sys.executable, os.path.abspath(__file__),
             "--worker", "--repeats", str(args.repeats)],
            capture_output=True, text=True, env=env, check=True)
        doc = json.loads(proc.stdout)
        if doc["backend"] != backend:
            raise SystemExit(f"expected backend {backend}, got {doc['backend']}")
        results[backend] = doc["times"]

    width = max(len(k) for k in results["numpy"])
    print(f"{'kernel':<{width}}  {'numpy (ms)':>11}  {'numba (ms)':>11}  {'speedup':>8}")
    for name, t_np in results["numpy"].items():
        t_nb = results["numba"][name]
        print(f"{name:<{width}}  {t_np * 1e3:>11.2f}  {t_nb * 1e3:>11.2f}  "
              f"{t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
