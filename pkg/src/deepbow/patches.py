"""Masked 2D patch extraction, channel stacking, and z-score normalization.

Patches are axial (fixed z) square windows on a stride lattice, kept when the
in-window mask fraction reaches coverage_min. Ordering is z, then y, then x
ascending; values are stored (n, size, size, channels) with axis 1 = x.
"""

from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import errors
from .dataio import MetricVolume

DEFAULT_SIZE = 16
DEFAULT_STRIDE = 4
DEFAULT_COVERAGE = 0.5

_STD_FLOOR = 1e-12


@dataclass
class Patch:
    size: int
    channels: int
    values: np.ndarray   # (size, size, channels)
    origin: tuple        # (x, y, z)
    subject_id: str
    region: str
    metric_group: str


@dataclass
class NormStats:
    mean: np.ndarray  # (channels,) float64
    std: np.ndarray   # (channels,) float64


@dataclass
class PatchSet:
    size: int
    channels: int
    values: np.ndarray       # (n, size, size, channels) float32
    origins: np.ndarray      # (n, 3) int32
    subject_ids: np.ndarray  # (n,) object
    region: str = ""
    metric_group: str = ""
    norm_stats: NormStats = None

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, i: int) -> Patch:
        return Patch(size=self.size, channels=self.channels,
                     values=self.values[i], origin=tuple(self.origins[i]),
                     subject_id=self.subject_ids[i], region=self.region,
                     metric_group=self.metric_group)

    def flat(self) -> np.ndarray:
        """(n, size*size*channels) view for raw-pixel feature use."""
        return self.values.reshape(len(self), -1)


def extract_patches(volume: MetricVolume, size: int = DEFAULT_SIZE,
                    stride: int = DEFAULT_STRIDE,
                    coverage_min: float = DEFAULT_COVERAGE,
                    subject_id: str = "", region: str = "",
                    metric_group: str = "") -> PatchSet:
    """Slide a size x size window over every axial slice.

    A window is emitted iff its in-mask fraction >= coverage_min. Raises
    EmptyResult when nothing qualifies (mask too small for the window).
    """
    nx, ny, nz = volume.dims
    if size < 2 or size > min(nx, ny):
        raise errors.ShapeMismatch(f"patch size {size} vs volume {nx}x{ny}")
    if stride < 1:
        raise errors.ShapeMismatch("stride must be >= 1")
    if not 0.0 < coverage_min <= 1.0:
        raise errors.ShapeMismatch("coverage_min must be in (0, 1]")

    area = float(size * size)
    vals, origins = [], []
    for z in range(nz):
        mask_wins = sliding_window_view(volume.mask[:, :, z], (size, size))
        vol_wins = sliding_window_view(volume.values[:, :, z], (size, size))
        mask_wins = mask_wins[::stride, ::stride]
        vol_wins = vol_wins[::stride, ::stride]
        cover = mask_wins.sum(axis=(2, 3), dtype=np.float64) / area
        keep = cover >= coverage_min
        xs, ys = np.nonzero(keep)
        order = np.lexsort((xs, ys))  # y ascending, then x
        for t in order:
            x, y = int(xs[t]), int(ys[t])
            vals.append(vol_wins[x, y])
            origins.append((x * stride, y * stride, z))
    if not vals:
        raise errors.EmptyResult(
            f"no window of {size}x{size} reaches coverage {coverage_min}")
    values = np.stack(vals).astype(np.float32)[..., None]
    n = values.shape[0]
    return PatchSet(size=size, channels=1, values=values,
                    origins=np.array(origins, dtype=np.int32),
                    subject_ids=np.array([subject_id] * n, dtype=object),
                    region=region, metric_group=metric_group)


def stack_metrics(per_metric_sets: list) -> PatchSet:
    """Concatenate aligned per-metric sets along the channel axis."""
    if not per_metric_sets:
        raise errors.OriginMismatch("no patch sets to stack")
    first = per_metric_sets[0]
    for s in per_metric_sets[1:]:
        if s.size != first.size or len(s) != len(first) \
                or not np.array_equal(s.origins, first.origins) \
                or not np.array_equal(s.subject_ids, first.subject_ids):
            raise errors.OriginMismatch(
                f"{s.metric_group}: patch grid differs from {first.metric_group}")
    values = np.concatenate([s.values for s in per_metric_sets], axis=3)
    group = "+".join(s.metric_group for s in per_metric_sets)
    return PatchSet(size=first.size, channels=values.shape[3], values=values,
                    origins=first.origins.copy(),
                    subject_ids=first.subject_ids.copy(),
                    region=first.region, metric_group=group)


def concat_sets(sets: list) -> PatchSet:
    """Pool same-shape patch sets along the batch axis (e.g. across subjects)."""
    first = sets[0]
    for s in sets[1:]:
        if s.size != first.size or s.channels != first.channels:
            raise errors.ShapeMismatch("cannot pool patch sets of differing shape")
    return PatchSet(
        size=first.size, channels=first.channels,
        values=np.concatenate([s.values for s in sets], axis=0),
        origins=np.concatenate([s.origins for s in sets], axis=0),
        subject_ids=np.concatenate([s.subject_ids for s in sets], axis=0),
        region=first.region, metric_group=first.metric_group)


def fit_norm(train: PatchSet) -> NormStats:
    """Per-channel mean/std over all training patch pixels (float64)."""
    if len(train) == 0:
        raise errors.EmptyPatchSet("cannot fit normalization on zero patches")
    flat = train.values.reshape(-1, train.channels).astype(np.float64)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    bad = np.nonzero(std < _STD_FLOOR)[0]
    if bad.size:
        raise errors.DegenerateChannel(f"constant channel(s) {bad.tolist()}")
    return NormStats(mean=mean, std=std)


def apply_norm(patch_set: PatchSet, stats: NormStats) -> PatchSet:
    if len(stats.mean) != patch_set.channels:
        raise errors.ShapeMismatch(
            f"norm stats for {len(stats.mean)} channels, set has {patch_set.channels}")
    z = (patch_set.values.astype(np.float64) - stats.mean) / stats.std
    return replace(patch_set, values=z.astype(np.float32), norm_stats=stats)
