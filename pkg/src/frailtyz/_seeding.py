"""Seed derivation and counter-based per-record uniforms."""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(seed: int, *path: int) -> int:
    """64-bit child seed for ``path`` under ``seed``.

    Children are independent of evaluation order, so any replicate can be
    regenerated on its own.
    """
    ss = np.random.SeedSequence(int(seed) & _MASK64, spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def rng_for(seed: int, *path: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(int(seed) & _MASK64, spawn_key=tuple(int(p) for p in path))))


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def record_uniforms(seed: int, record_ids) -> np.ndarray:
    """Open-interval uniforms, one per record id, fixed by ``(seed, id)``.

    A record's draw does not depend on which other records are present.
    """
    ids = np.asarray(record_ids, dtype=np.int64).astype(np.uint64)
    key = _splitmix64(np.array([int(seed) & _MASK64], dtype=np.uint64))[0]
    with np.errstate(over="ignore"):
        bits = _splitmix64(_splitmix64(ids ^ key) + key)
    # top 53 bits, shifted off zero
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
