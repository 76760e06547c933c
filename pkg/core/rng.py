"""Seeded random streams.

All randomness flows through NumPy's ``PCG64`` bit generator seeded by a
``SeedSequence``. NumPy guarantees the PCG64 stream for a given seed sequence is
identical on every platform, which keeps golden values portable. Sub-streams are
derived from ``(seed, *keys)`` so per-sample work does not depend on ordering.
"""

import zlib
from typing import Sequence, Union

import numpy as np

Key = Union[int, str]


def _key_to_int(key: Key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise ValueError(f"stream keys must be non-negative, got {key}")
    return int(key)


def make_rng(seed: int, *keys: Key) -> np.random.Generator:
    """Generator for the stream identified by ``seed`` and optional sub-keys."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key_to_int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def glorot_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=tuple(shape))


def conv_fans(shape: Sequence[int]) -> tuple:
    """Fan-in/fan-out of a (O, I, kh, kw) kernel."""
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive
