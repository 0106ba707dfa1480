"""Dataset model, DBV1 volume files, manifests, and phantom generation.

DBV1 layout: 4 ASCII magic bytes "DBV1", three little-endian uint32 dims
(nx, ny, nz), then nx*ny*nz little-endian float32 values, x-fastest. Masks are
separate DBV1 files thresholded at 0.5 on read.

Phantoms are "mean-matched": every subject's in-mask mean is pinned to a fixed
per-(region, metric) level, so region averages carry no class signal and any
separability lives in patch-scale texture. Patients additionally receive a
high-frequency grating in a seeded lesion block before the pin.
"""

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import errors
from .seeding import derive_rng

MAGIC = b"DBV1"

DEFAULT_METRIC_CONFIG = {
    "cc": ["AWF", "DA", "De_par", "FA", "MD", "AK", "MK", "RK"],
    "thalamus": ["FA", "MD", "AK", "MK", "RK"],
}

CLINICAL_NAMES = ["Stroop", "SDMT", "CVLT", "FSS"]

# plausible scan-native base levels and field scales per metric
_BASE_LEVEL = {
    "AWF": 0.35, "DA": 1.1, "De_par": 1.3, "FA": 0.45,
    "MD": 0.9, "AK": 0.8, "MK": 1.0, "RK": 1.2,
}
_FIELD_SCALE = {m: 0.12 * v for m, v in _BASE_LEVEL.items()}

_CLIN_BASE = np.array([50.0, 30.0, 45.0, 4.0])
_CLIN_SD = np.array([10.0, 6.0, 9.0, 1.2])

_SMOOTH_SIGMA = 2.0


@dataclass
class MetricVolume:
    """One 3D scalar grid plus its binary region mask (1 = inside)."""

    values: np.ndarray  # (nx, ny, nz) float32
    mask: np.ndarray    # (nx, ny, nz) uint8

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    def validate(self) -> None:
        if self.values.ndim != 3 or self.mask.shape != self.values.shape:
            raise errors.ShapeMismatch(
                f"values {self.values.shape} vs mask {self.mask.shape}")
        if not np.all(np.isfinite(self.values)):
            raise errors.NonFinite("volume contains NaN or Inf")
        if not self.mask.any():
            raise errors.DataError("mask contains no voxels")


@dataclass
class SubjectRecord:
    id: str
    label: int  # 1 = patient (positive), 0 = control
    demographics: np.ndarray  # (2,) age, sex
    clinical: np.ndarray      # (4,) Stroop, SDMT, CVLT, FSS
    regions: dict             # region -> {metric -> MetricVolume}

    def validate(self) -> None:
        if len(self.demographics) != 2 or len(self.clinical) != 4:
            raise errors.SchemaError(
                f"subject {self.id}: need 2 demographic and 4 clinical values")
        if self.label not in (0, 1):
            raise errors.SchemaError(f"subject {self.id}: label must be 0/1")


@dataclass
class Dataset:
    subjects: list
    metric_config: dict = field(default_factory=lambda: dict(DEFAULT_METRIC_CONFIG))

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.subjects], dtype=np.int8)

    @property
    def subject_ids(self) -> list[str]:
        return [s.id for s in self.subjects]

    def validate(self) -> None:
        ids = self.subject_ids
        if len(set(ids)) != len(ids):
            raise errors.SchemaError("duplicate subject ids")
        for s in self.subjects:
            s.validate()
            for region, metrics in self.metric_config.items():
                have = s.regions.get(region, {})
                for m in metrics:
                    if m not in have:
                        raise errors.MetricMismatch(
                            f"subject {s.id}: missing {region}/{m}")


# ---- DBV1 ------------------------------------------------------------------

def _read_dbv(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise errors.MissingVolume(str(path))
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise errors.BadMagic(f"{path}: not a DBV1 file")
    if len(raw) < 16:
        raise errors.TruncatedFile(f"{path}: header incomplete")
    nx, ny, nz = struct.unpack("<3I", raw[4:16])
    need = nx * ny * nz * 4
    if len(raw) - 16 < need:
        raise errors.TruncatedFile(
            f"{path}: payload {len(raw) - 16} bytes, need {need}")
    flat = np.frombuffer(raw, dtype="<f4", count=nx * ny * nz, offset=16)
    return flat.reshape((nx, ny, nz), order="F")


def _write_dbv(arr: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    nx, ny, nz = arr.shape
    payload = np.asarray(arr, dtype="<f4").ravel(order="F").tobytes()
    path.write_bytes(MAGIC + struct.pack("<3I", nx, ny, nz) + payload)


def mask_companion_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".mask" + p.suffix)


def read_volume(path, mask_path=None) -> MetricVolume:
    """Read a DBV1 volume. The mask comes from mask_path if given, else from
    the companion file <stem>.mask<suffix> when present, else all-ones."""
    values = _read_dbv(path)
    if not np.all(np.isfinite(values)):
        raise errors.NonFinite(f"{path}: NaN/Inf payload")
    if mask_path is None:
        candidate = mask_companion_path(path)
        mask_path = candidate if candidate.exists() else None
    if mask_path is None:
        mask = np.ones(values.shape, dtype=np.uint8)
    else:
        raw = _read_dbv(mask_path)
        if raw.shape != values.shape:
            raise errors.ShapeMismatch(
                f"mask dims {raw.shape} != volume dims {values.shape}")
        mask = (raw > 0.5).astype(np.uint8)
    vol = MetricVolume(values=np.ascontiguousarray(values), mask=mask)
    vol.validate()
    return vol


def write_volume(volume: MetricVolume, path, mask_path=None) -> None:
    volume.validate()
    _write_dbv(volume.values, path)
    if mask_path is not None:
        _write_dbv(volume.mask.astype(np.float32), mask_path)


# ---- manifest --------------------------------------------------------------

def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise errors.MissingVolume(f"manifest not found: {manifest_path}")
    except json.JSONDecodeError as e:
        raise errors.SchemaError(f"manifest is not valid JSON: {e}")
    if not isinstance(doc, dict) or "subjects" not in doc:
        raise errors.SchemaError("manifest must be an object with 'subjects'")
    metric_config = doc.get("metric_config", DEFAULT_METRIC_CONFIG)
    if not isinstance(metric_config, dict) or not metric_config:
        raise errors.SchemaError("metric_config must be a non-empty object")
    base = manifest_path.parent
    subjects = []
    for entry in doc["subjects"]:
        try:
            sid = entry["id"]
            label = int(entry["label"])
            demo = np.asarray(entry["demographics"], dtype=np.float64)
            clin = np.asarray(entry["clinical"], dtype=np.float64)
            region_doc = entry["regions"]
        except (KeyError, TypeError) as e:
            raise errors.SchemaError(f"malformed subject entry: {e}")
        regions = {}
        for region, metrics in metric_config.items():
            if region not in region_doc:
                raise errors.MetricMismatch(f"subject {sid}: missing region {region}")
            regions[region] = {}
            for m in metrics:
                if m not in region_doc[region]:
                    raise errors.MetricMismatch(f"subject {sid}: missing {region}/{m}")
                ref = region_doc[region][m]
                vol_path = base / ref["volume"]
                mask_path = base / ref["mask"] if ref.get("mask") else None
                regions[region][m] = read_volume(vol_path, mask_path)
        rec = SubjectRecord(id=sid, label=label, demographics=demo,
                            clinical=clin, regions=regions)
        subjects.append(rec)
    ds = Dataset(subjects=subjects, metric_config=metric_config)
    ds.validate()
    return ds


def save_dataset(dataset: Dataset, out_dir) -> Path:
    """Write volumes + manifest.json under out_dir; returns the manifest path.

    Output is byte-deterministic: fixed file layout, sorted JSON keys, no
    timestamps. One mask file per (subject, region) is shared by its metrics.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in dataset.subjects:
        region_doc = {}
        for region, metrics in dataset.metric_config.items():
            mask_rel = f"{s.id}/{region}/mask.dbv"
            first = s.regions[region][metrics[0]]
            _write_dbv(first.mask.astype(np.float32), out_dir / mask_rel)
            region_doc[region] = {}
            for m in metrics:
                vol_rel = f"{s.id}/{region}/{m}.dbv"
                _write_dbv(s.regions[region][m].values, out_dir / vol_rel)
                region_doc[region][m] = {"volume": vol_rel, "mask": mask_rel}
        entries.append({
            "id": s.id,
            "label": int(s.label),
            "demographics": [float(v) for v in s.demographics],
            "clinical": [float(v) for v in s.clinical],
            "regions": region_doc,
        })
    doc = {"metric_config": dataset.metric_config, "subjects": entries}
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return manifest


# ---- phantom generation ------------------------------------------------------

@dataclass
class PhantomSpec:
    """Parameters of the synthetic mean-matched dataset.

    effect_size scales the lesion grating's amplitude relative to the
    metric's base level; 0 makes patients and controls identically
    distributed. lesion_metrics=None perturbs every configured metric.
    """

    n_subjects: int = 114
    n_patients: int = 70
    dims: dict = field(default_factory=lambda: {"cc": (28, 28, 2), "thalamus": (24, 24, 2)})
    lesion_fraction: float = 0.35
    effect_size: float = 0.6
    seed: int = 7
    clinical_gap: float = 0.0
    lesion_metrics: dict = None
    metric_config: dict = field(default_factory=lambda: dict(DEFAULT_METRIC_CONFIG))

    def validate(self) -> None:
        if self.n_subjects <= 0 or self.n_patients < 0:
            raise errors.InvalidSpec("subject counts must be positive")
        if self.n_patients > self.n_subjects:
            raise errors.InvalidSpec(
                f"n_patients {self.n_patients} > n_subjects {self.n_subjects}")
        if not 0.0 < self.lesion_fraction <= 1.0:
            raise errors.InvalidSpec("lesion_fraction must be in (0, 1]")
        if self.effect_size < 0.0 or not math.isfinite(self.effect_size):
            raise errors.InvalidSpec("effect_size must be >= 0")
        for region in self.metric_config:
            if region not in self.dims:
                raise errors.InvalidSpec(f"no dims for region {region}")
            if any(int(d) <= 0 for d in self.dims[region]):
                raise errors.InvalidSpec(f"non-positive dims for {region}")


def _ellipse_mask(dims) -> np.ndarray:
    nx, ny, nz = dims
    cx, cy = (nx - 1) / 2.0, (ny - 1) / 2.0
    ax, ay = max(nx / 2.0 - 0.5, 0.5), max(ny / 2.0 - 0.5, 0.5)
    xs = np.arange(nx)[:, None]
    ys = np.arange(ny)[None, :]
    plane = (((xs - cx) / ax) ** 2 + ((ys - cy) / ay) ** 2) <= 1.0
    return np.repeat(plane[:, :, None], nz, axis=2).astype(np.uint8)


def _lesion_box(mask: np.ndarray, fraction: float, rng) -> tuple[slice, slice]:
    inplane = mask[:, :, 0] > 0
    xs, ys = np.nonzero(inplane)
    x0b, x1b = int(xs.min()), int(xs.max())
    y0b, y1b = int(ys.min()), int(ys.max())
    side = math.sqrt(fraction)
    wx = max(1, round(side * (x1b - x0b + 1)))
    wy = max(1, round(side * (y1b - y0b + 1)))
    x0 = int(rng.integers(x0b, x1b - wx + 2))
    y0 = int(rng.integers(y0b, y1b - wy + 2))
    return slice(x0, x0 + wx), slice(y0, y0 + wy)


def _pin_mean(vol: np.ndarray, mask: np.ndarray, level: float) -> np.ndarray:
    """Shift so the in-mask mean equals level exactly (to float32 rounding)."""
    sel = mask > 0
    vol = vol + (level - vol[sel].mean())
    vol = vol + (level - vol[sel].mean())  # second pass kills summation residue
    out = vol.astype(np.float32)
    out = out + np.float32(level - float(out[sel].mean(dtype=np.float64)))
    return out


def generate_phantom_dataset(spec: PhantomSpec) -> Dataset:
    """Deterministic synthetic cohort; see PhantomSpec.

    Per (subject, region, metric): a smoothed, unit-std noise field scaled to
    the metric's level; patients additionally get a checkerboard grating of
    amplitude effect_size*level, with per-subject random parity, in a seeded
    lesion block (intersected with the mask, full z extent). The grating sits
    at the highest representable spatial frequency and the random parity makes
    each lesion voxel +amp or -amp with equal probability, so across the
    patient population it is a pure per-voxel variance increase. Every volume
    is then shifted so its in-mask mean equals the metric's base level
    exactly; mean-style features therefore carry no class signal while
    patch-pattern features do.
    """
    spec.validate()
    masks = {region: _ellipse_mask(spec.dims[region]) for region in spec.metric_config}
    lesion_metrics = spec.lesion_metrics
    if lesion_metrics is None:
        lesion_metrics = {r: list(ms) for r, ms in spec.metric_config.items()}
    subjects = []
    for i in range(spec.n_subjects):
        label = 1 if i < spec.n_patients else 0
        sid = f"s{i:03d}"
        demo_rng = derive_rng(spec.seed, "demo", sid)
        age = demo_rng.uniform(18.0, 64.0)
        sex = float(demo_rng.integers(0, 2))
        clin_rng = derive_rng(spec.seed, "clin", sid)
        clinical = _CLIN_BASE + label * spec.clinical_gap * _CLIN_SD \
            + clin_rng.standard_normal(4) * _CLIN_SD
        regions = {}
        for region, metrics in spec.metric_config.items():
            mask = masks[region]
            nz = spec.dims[region][2]
            lesion = None
            if label == 1:
                box_rng = derive_rng(spec.seed, "lesion", sid, region)
                lesion = _lesion_box(mask, spec.lesion_fraction, box_rng)
            regions[region] = {}
            for m in metrics:
                level = _BASE_LEVEL[m]
                scale = _FIELD_SCALE[m]
                rng = derive_rng(spec.seed, "field", sid, region, m)
                field_ = rng.standard_normal(spec.dims[region])
                field_ = gaussian_filter(field_, sigma=(_SMOOTH_SIGMA, _SMOOTH_SIGMA, 0.0))
                field_ = (field_ - field_.mean()) / field_.std()
                vol = level + scale * field_
                if lesion is not None and m in lesion_metrics.get(region, ()):
                    sx, sy = lesion
                    noise_rng = derive_rng(spec.seed, "noise", sid, region, m)
                    phase = int(noise_rng.integers(0, 2))
                    xs = np.arange(sx.start, sx.stop)[:, None]
                    ys = np.arange(sy.start, sy.stop)[None, :]
                    checker = np.where((xs + ys + phase) % 2 == 0, 1.0, -1.0)
                    block = np.zeros(spec.dims[region])
                    block[sx, sy, :] = (spec.effect_size * level) * checker[:, :, None]
                    vol = vol + block * (mask > 0)
                values = _pin_mean(vol, mask, level)
                regions[region][m] = MetricVolume(values=values, mask=mask.copy())
        subjects.append(SubjectRecord(
            id=sid, label=label,
            demographics=np.array([age, sex]),
            clinical=clinical, regions=regions))
    ds = Dataset(subjects=subjects, metric_config={r: list(m) for r, m in spec.metric_config.items()})
    ds.validate()
    return ds
