"""Seeded randomness.

All stochastic code draws from Philox (a 64-bit counter-based generator)
keyed by a SeedSequence built from the run seed plus a stream label, so
independent consumers never share state.
"""

from __future__ import annotations

import zlib

import numpy as np


def _label(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def make_rng(seed: int, *stream) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_label(p) for p in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape if shape is not None else (fan_in, fan_out))
