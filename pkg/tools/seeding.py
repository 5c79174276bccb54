"""Derived seeds so every stage draws from its own reproducible stream."""

from __future__ import annotations

import zlib
from typing import Union

import numpy as np

SeedKey = Union[int, str]


def _key_to_int(key: SeedKey) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise ValueError(f"Seed keys must be non-negative, got {key}")
    return int(key)


def _sequence(seed: int, keys) -> np.random.SeedSequence:
    return np.random.SeedSequence([_key_to_int(seed), *(_key_to_int(k) for k in keys)])


def derive_seed(seed: int, *keys: SeedKey) -> int:
    """Mix a base seed with stage/epoch/record keys into a 63-bit seed."""
    state = _sequence(seed, keys).generate_state(1, dtype=np.uint64)[0]
    return int(state >> np.uint64(1))


def make_rng(seed: int, *keys: SeedKey) -> np.random.Generator:
    return np.random.default_rng(_sequence(seed, keys))
