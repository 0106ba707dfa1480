"""Deterministic RNG derivation.

Every random stream in the pipeline is derived from one master seed plus a
path of string parts (e.g. "cv", repeat index, scope). Streams are independent
of evaluation order, so stages can run in any order or concurrently without
changing results.
"""

import hashlib

import numpy as np

_WORDS = 4  # 128 bits of path entropy


def _path_words(parts) -> list[int]:
    text = "/".join(str(p) for p in parts)
    digest = hashlib.blake2s(text.encode("utf-8"), digest_size=4 * _WORDS).digest()
    return [int.from_bytes(digest[4 * i:4 * i + 4], "little") for i in range(_WORDS)]


def derive_rng(master_seed: int, *parts) -> np.random.Generator:
    """Generator for the stream named by (master_seed, *parts)."""
    seq = np.random.SeedSequence([int(master_seed) & 0xFFFFFFFF] + _path_words(parts))
    return np.random.default_rng(seq)


def derive_seed(master_seed: int, *parts) -> int:
    """32-bit seed for APIs that take an integer instead of a Generator."""
    seq = np.random.SeedSequence([int(master_seed) & 0xFFFFFFFF] + _path_words(parts))
    return int(seq.generate_state(1, np.uint32)[0])
