"""Visual vocabularies: k-means codebooks and bag-of-words histograms.

kmeans_fit seeds with k-means++ and runs Lloyd iterations in float64 until the
max centroid shift drops below tol, the assignment stops changing (an exact
fixed point, reachable even at tol=0), or max_iters. Empty clusters are
re-seeded to the point currently farthest from its assigned centroid. Inertia
is asserted non-increasing every iteration.

The same quantize/histogram path serves latent codes and raw pixel vectors;
only the feature dimension differs.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import errors, kernels
from .kernels import common

_GEMM_CUTOVER = 1 << 22  # n*k*d above this rides BLAS
_MONOTONE_SLACK = 1e-9   # relative slack for the inertia assertion


@dataclass
class Codebook:
    k: int
    centroids: np.ndarray  # (k, d) float64
    feature_kind: str = "latent"  # latent | raw
    scope: tuple = ()
    fit_seed: int = 0
    inertia_trace: list = field(default_factory=list, repr=False)
    n_iter: int = 0
    converged: bool = True

    @property
    def d(self) -> int:
        return self.centroids.shape[1]


def _assign(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    if x.shape[0] * centroids.shape[0] * x.shape[1] >= _GEMM_CUTOVER:
        return common.assign_nearest_gemm(x, centroids)
    return kernels.assign_nearest_loop(x, centroids)


def _sq_dist_to(x: np.ndarray, centroids: np.ndarray, idx: np.ndarray) -> np.ndarray:
    diff = x - centroids[idx]
    return np.einsum("ij,ij->i", diff, diff)


def kmeans_fit(vectors, k: int, seed: int, max_iters: int = 300,
               tol: float = 1e-6, feature_kind: str = "latent",
               scope: tuple = ()) -> Codebook:
    x = np.ascontiguousarray(np.asarray(vectors, dtype=np.float64))
    if x.ndim != 2:
        raise errors.DimMismatch(f"expected (n, d) vectors, got {x.shape}")
    n = x.shape[0]
    if k < 1:
        raise errors.TooFewVectors("k must be >= 1")
    if n < k or np.unique(x, axis=0).shape[0] < k:
        raise errors.TooFewVectors(f"{n} vectors ({len(np.unique(x, axis=0))} distinct) < k={k}")

    rng = np.random.default_rng(seed)

    # k-means++ seeding
    centroids = np.empty((k, x.shape[1]), dtype=np.float64)
    centroids[0] = x[int(rng.integers(n))]
    d2 = _sq_dist_to(x, centroids, np.zeros(n, dtype=np.int64))
    for j in range(1, k):
        probs = d2 / d2.sum()
        pick = int(rng.choice(n, p=probs))
        centroids[j] = x[pick]
        diff = x - centroids[j]
        np.minimum(d2, np.einsum("ij,ij->i", diff, diff), out=d2)

    inertia_trace = []
    prev_idx = None
    converged = False
    it = 0
    while it < max_iters:
        it += 1
        idx = _assign(x, centroids)
        # re-seed empty clusters from the farthest assigned point
        for _ in range(k):
            counts = np.bincount(idx, minlength=k)
            empties = np.nonzero(counts == 0)[0]
            if empties.size == 0:
                break
            d2a = _sq_dist_to(x, centroids, idx)
            for e in empties:
                far = int(np.argmax(d2a))
                centroids[e] = x[far]
                d2a[far] = -1.0
            idx = _assign(x, centroids)
        inertia = float(_sq_dist_to(x, centroids, idx).sum())
        if inertia_trace and inertia > inertia_trace[-1] * (1.0 + _MONOTONE_SLACK) + 1e-12:
            raise AssertionError(
                f"inertia increased: {inertia_trace[-1]} -> {inertia}")
        inertia_trace.append(inertia)
        new_centroids = centroids.copy()
        for j in range(k):
            members = idx == j
            new_centroids[j] = x[members].mean(axis=0)
        shift = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max())
        centroids = new_centroids
        if prev_idx is not None and np.array_equal(idx, prev_idx):
            converged = True
            break
        prev_idx = idx
        if shift < tol:
            converged = True
            break
    return Codebook(k=k, centroids=centroids, feature_kind=feature_kind,
                    scope=tuple(scope), fit_seed=seed,
                    inertia_trace=inertia_trace, n_iter=it, converged=converged)


def quantize(codebook: Codebook, vector) -> int:
    """Index of the nearest centroid; ties break to the lowest index."""
    v = np.asarray(vector, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != codebook.d:
        raise errors.DimMismatch(f"vector dim {v.shape} vs codebook d={codebook.d}")
    return int(kernels.assign_nearest_loop(
        np.ascontiguousarray(v[None, :]), codebook.centroids)[0])


def quantize_batch(codebook: Codebook, vectors) -> np.ndarray:
    x = np.ascontiguousarray(np.asarray(vectors, dtype=np.float64))
    if x.ndim != 2 or x.shape[1] != codebook.d:
        raise errors.DimMismatch(f"vectors {x.shape} vs codebook d={codebook.d}")
    return _assign(x, codebook.centroids)


@dataclass
class BowHistogram:
    scope: tuple
    bins: np.ndarray  # (k,) float64, sums to 1


def histogram_from_words(codebook: Codebook, words: np.ndarray,
                         scope: tuple = None) -> BowHistogram:
    if words.size == 0:
        raise errors.EmptyRegion(f"no features for scope {codebook.scope}")
    bins = np.bincount(words, minlength=codebook.k).astype(np.float64)
    bins /= float(words.size)
    return BowHistogram(scope=codebook.scope if scope is None else scope, bins=bins)


def bow_histogram(codebook: Codebook, features) -> BowHistogram:
    """L1-normalized histogram of quantized words over the feature list."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise errors.EmptyRegion("bow_histogram needs at least one feature vector")
    return histogram_from_words(codebook, quantize_batch(codebook, feats))


def codebook_to_json(cb: Codebook) -> str:
    return json.dumps({
        "k": cb.k,
        "d": cb.d,
        "scope": list(cb.scope),
        "feature_kind": cb.feature_kind,
        "fit_seed": cb.fit_seed,
        "centroids": cb.centroids.tolist(),
    })


def codebook_from_json(text: str) -> Codebook:
    doc = json.loads(text)
    return Codebook(k=doc["k"], centroids=np.asarray(doc["centroids"], dtype=np.float64),
                    feature_kind=doc["feature_kind"], scope=tuple(doc["scope"]),
                    fit_seed=doc.get("fit_seed", 0))
