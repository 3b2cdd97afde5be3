"""Seed derivation helpers.

Every random draw in the lab comes from a generator derived from a tuple of
integer keys, so results never depend on call order or on how work is split
across processes.
"""

from __future__ import annotations

import numpy as np

# Stable integer codes for string keys (hash() is salted per process).
_NAMESPACES = {
    "scene": 1,
    "noise": 2,
    "tables": 3,
    "schedule": 4,
    "train": 11,
    "val": 12,
    "test": 13,
    "novel_test": 14,
    "model": 21,
    "data": 22,
    "replay": 23,
    "fisher": 24,
}


def namespace(name: str) -> int:
    """Integer code for a named random stream."""
    try:
        return _NAMESPACES[name]
    except KeyError:
        raise ValueError(f"Unknown random stream: {name}") from None


def derive_rng(*keys: int | str) -> np.random.Generator:
    """Generator seeded from a tuple of non-negative ints / stream names."""
    entropy = [namespace(k) if isinstance(k, str) else int(k) for k in keys]
    if any(e < 0 for e in entropy):
        raise ValueError(f"Seed keys must be non-negative: {keys}")
    return np.random.default_rng(np.random.SeedSequence(entropy))
