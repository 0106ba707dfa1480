"""Convolutional auto-encoder: explicit forward/backward, SGD, encode.

Architecture: 4 encoder stages (conv 3x3 pad 1 -> ReLU -> 2x2 max pool) and a
mirrored 4-stage decoder (2x nearest upsample -> conv 3x3 -> ReLU, final stage
linear). A stage pools only while the spatial side exceeds 1, and the mirrored
decoder stage upsamples iff its twin pooled; for a 16x16 input that is the
full 16->8->4->2->1 ladder. The latent is the flattened 1x1xL bottleneck.

Weights are Glorot-uniform (fan = 9 * channels), biases zero. Storage dtype is
float32 by default with float64 accumulation inside every reduction; float64
models are supported for finite-difference verification.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import errors, kernels
from .patches import PatchSet

_VALID_INPUT = (2, 4, 8, 16)
_N_STAGES = 4


@dataclass(frozen=True)
class CaeArch:
    input_size: int = 16
    in_channels: int = 1
    widths: tuple = (8, 16, 32, 32)

    def __post_init__(self):
        if self.input_size not in _VALID_INPUT:
            raise errors.InvalidArch(
                f"input_size {self.input_size} not in {_VALID_INPUT}")
        if self.in_channels < 1:
            raise errors.InvalidArch("in_channels must be >= 1")
        if len(self.widths) != _N_STAGES or any(w < 1 for w in self.widths):
            raise errors.InvalidArch("widths must be 4 positive integers")

    @property
    def latent_dim(self) -> int:
        return int(self.widths[-1])

    @property
    def pooled(self) -> tuple:
        """Whether each encoder stage downsamples (mirrors to the decoder)."""
        flags = []
        s = self.input_size
        for _ in range(_N_STAGES):
            flags.append(s > 1)
            if s > 1:
                s //= 2
        if s != 1:
            raise errors.InvalidArch(f"input {self.input_size} does not reduce to 1x1")
        return tuple(flags)

    def conv_channels(self) -> list:
        """(c_in, c_out) for the 8 conv layers, encoder then decoder."""
        enc_in = [self.in_channels] + list(self.widths[:-1])
        pairs = list(zip(enc_in, self.widths))
        dec_out = list(self.widths[-2::-1]) + [self.in_channels]
        dec_in = [self.latent_dim] + dec_out[:-1]
        pairs += list(zip(dec_in, dec_out))
        return pairs


@dataclass
class AutoEncoderModel:
    arch: CaeArch
    weights: list  # 8 tensors (3, 3, c_in, c_out)
    biases: list   # 8 vectors (c_out,)
    seed: int
    dtype: np.dtype = np.float32


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 500
    learning_rate: float = 3e-4
    shuffle_seed: int = 0

    def validate(self):
        if self.epochs < 0:
            raise errors.InvalidArch("epochs must be >= 0")
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise errors.InvalidArch("batch_size and learning_rate must be positive")


@dataclass
class Gradients:
    dw: list
    db: list


def param_count(arch: CaeArch) -> int:
    return sum(9 * ci * co + co for ci, co in arch.conv_channels())


def init_model(arch: CaeArch, seed: int, dtype=np.float32) -> AutoEncoderModel:
    """Glorot-uniform kernels in +-sqrt(6/(fan_in+fan_out)), fan = 9*C."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for ci, co in arch.conv_channels():
        limit = np.sqrt(6.0 / (9.0 * ci + 9.0 * co))
        weights.append(rng.uniform(-limit, limit, size=(3, 3, ci, co)).astype(dtype))
        biases.append(np.zeros(co, dtype=dtype))
    return AutoEncoderModel(arch=arch, weights=weights, biases=biases,
                            seed=seed, dtype=np.dtype(dtype))


def _as_batch(model: AutoEncoderModel, batch) -> np.ndarray:
    if isinstance(batch, PatchSet):
        x = batch.values
    else:
        x = np.asarray(batch)
    if x.ndim == 3:
        x = x[None]
    s, c = model.arch.input_size, model.arch.in_channels
    if x.ndim != 4 or x.shape[1:] != (s, s, c):
        raise errors.ShapeMismatch(
            f"batch shape {x.shape} vs arch input ({s},{s},{c})")
    return np.ascontiguousarray(x, dtype=model.dtype)


def _forward_cache(model: AutoEncoderModel, x: np.ndarray):
    arch = model.arch
    pooled = arch.pooled
    cache = {"conv_in": [None] * 8, "pre": [None] * 8, "pool_idx": [None] * 4}
    h = x
    for i in range(_N_STAGES):
        cache["conv_in"][i] = h
        pre = kernels.conv3x3_forward(h, model.weights[i], model.biases[i])
        cache["pre"][i] = pre
        h = kernels.relu(pre)
        if pooled[i]:
            h, idx = kernels.maxpool2(h)
            cache["pool_idx"][i] = idx
    latents = h.reshape(h.shape[0], arch.latent_dim)
    for s in range(_N_STAGES):
        li = _N_STAGES + s
        if pooled[_N_STAGES - 1 - s]:
            h = kernels.upsample2(h)
        cache["conv_in"][li] = h
        pre = kernels.conv3x3_forward(h, model.weights[li], model.biases[li])
        cache["pre"][li] = pre
        h = kernels.relu(pre) if s < _N_STAGES - 1 else pre
    return latents, h, cache


def forward(model: AutoEncoderModel, batch):
    """Returns (latents (n, L), reconstructions shaped like the input)."""
    x = _as_batch(model, batch)
    latents, recon, _ = _forward_cache(model, x)
    return latents, recon


def encode(model: AutoEncoderModel, patch):
    """Latent vector(s): (L,) for a single patch, (n, L) for a batch."""
    single = not isinstance(patch, PatchSet) and np.asarray(patch).ndim == 3
    x = _as_batch(model, patch)
    arch = model.arch
    h = x
    for i in range(_N_STAGES):
        pre = kernels.conv3x3_forward(h, model.weights[i], model.biases[i])
        h = kernels.relu(pre)
        if arch.pooled[i]:
            h, _ = kernels.maxpool2(h)
    latents = h.reshape(h.shape[0], arch.latent_dim)
    return latents[0] if single else latents


def loss(reconstructions: np.ndarray, batch) -> float:
    """Mean squared per-element error, averaged over the batch (float64)."""
    x = batch.values if isinstance(batch, PatchSet) else np.asarray(batch)
    if reconstructions.shape != x.shape:
        raise errors.ShapeMismatch(
            f"reconstructions {reconstructions.shape} vs batch {x.shape}")
    d = reconstructions.astype(np.float64) - x.astype(np.float64)
    return float(np.mean(d * d))


def _backward_from_cache(model: AutoEncoderModel, x, recon, cache) -> Gradients:
    arch = model.arch
    pooled = arch.pooled
    n_elem = float(x.size)
    g = ((recon.astype(np.float64) - x.astype(np.float64)) * (2.0 / n_elem)) \
        .astype(model.dtype)
    dw = [None] * 8
    db = [None] * 8
    for s in range(_N_STAGES - 1, -1, -1):
        li = _N_STAGES + s
        if s < _N_STAGES - 1:
            g = kernels.relu_backward(g, cache["pre"][li])
        dwi, dbi = kernels.conv3x3_backward_params(cache["conv_in"][li], g)
        dw[li] = dwi.astype(model.dtype)
        db[li] = dbi.astype(model.dtype)
        g = kernels.conv3x3_backward_input(g, model.weights[li])
        if pooled[_N_STAGES - 1 - s]:
            g = kernels.upsample2_backward(g)
    for i in range(_N_STAGES - 1, -1, -1):
        if pooled[i]:
            g = kernels.maxpool2_backward(g, cache["pool_idx"][i])
        g = kernels.relu_backward(g, cache["pre"][i])
        dwi, dbi = kernels.conv3x3_backward_params(cache["conv_in"][i], g)
        dw[i] = dwi.astype(model.dtype)
        db[i] = dbi.astype(model.dtype)
        g = kernels.conv3x3_backward_input(g, model.weights[i])
    return Gradients(dw=dw, db=db)


def backward(model: AutoEncoderModel, batch) -> Gradients:
    """Gradient of loss() w.r.t. every parameter, shapes matching the model."""
    x = _as_batch(model, batch)
    _, recon, cache = _forward_cache(model, x)
    return _backward_from_cache(model, x, recon, cache)


def sgd_step(model: AutoEncoderModel, grads: Gradients, learning_rate: float) -> AutoEncoderModel:
    lr = model.dtype.type(learning_rate)
    weights = [w - lr * g for w, g in zip(model.weights, grads.dw)]
    biases = [b - lr * g for b, g in zip(model.biases, grads.db)]
    return AutoEncoderModel(arch=model.arch, weights=weights, biases=biases,
                            seed=model.seed, dtype=model.dtype)


def train(model: AutoEncoderModel, patch_set: PatchSet, config: TrainConfig):
    """SGD over shuffled minibatches; returns (trained model, per-epoch loss).

    The trace records each epoch's mean reconstruction MSE measured on the
    batches as they are visited (before their own update), total-element
    weighted so partial final batches count correctly.
    """
    config.validate()
    x_all = _as_batch(model, patch_set)
    n = x_all.shape[0]
    if n == 0:
        raise errors.EmptyPatchSet("train needs at least one patch")
    rng = np.random.default_rng(config.shuffle_seed)
    lr = model.dtype.type(config.learning_rate)
    weights = [w.copy() for w in model.weights]
    biases = [b.copy() for b in model.biases]
    work = AutoEncoderModel(arch=model.arch, weights=weights, biases=biases,
                            seed=model.seed, dtype=model.dtype)
    trace = []
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        sse = 0.0
        for lo in range(0, n, config.batch_size):
            xb = np.ascontiguousarray(x_all[perm[lo:lo + config.batch_size]])
            _, recon, cache = _forward_cache(work, xb)
            d = recon.astype(np.float64) - xb.astype(np.float64)
            sse += float(np.sum(d * d))
            grads = _backward_from_cache(work, xb, recon, cache)
            for i in range(8):
                weights[i] -= lr * grads.dw[i]
                biases[i] -= lr * grads.db[i]
        trace.append(sse / float(x_all.size))
    return work, trace


# ---- serialization -----------------------------------------------------------

def model_to_json(model: AutoEncoderModel) -> str:
    doc = {
        "arch": {
            "input_size": model.arch.input_size,
            "in_channels": model.arch.in_channels,
            "widths": list(model.arch.widths),
        },
        "seed": int(model.seed),
        "dtype": np.dtype(model.dtype).name,
        "layers": [
            {"w": w.tolist(), "b": b.tolist()}
            for w, b in zip(model.weights, model.biases)
        ],
    }
    return json.dumps(doc)


def model_from_json(text: str) -> AutoEncoderModel:
    doc = json.loads(text)
    arch = CaeArch(input_size=doc["arch"]["input_size"],
                   in_channels=doc["arch"]["in_channels"],
                   widths=tuple(doc["arch"]["widths"]))
    dtype = np.dtype(doc["dtype"])
    weights = [np.asarray(layer["w"], dtype=dtype) for layer in doc["layers"]]
    biases = [np.asarray(layer["b"], dtype=dtype) for layer in doc["layers"]]
    return AutoEncoderModel(arch=arch, weights=weights, biases=biases,
                            seed=doc["seed"], dtype=dtype)
