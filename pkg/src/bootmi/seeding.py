"""Deterministic random streams keyed by (master seed, index path)."""

from __future__ import annotations

import numpy as np


def as_seed_sequence(seed) -> np.random.SeedSequence:
    """Accept an int, a SeedSequence, a Generator, or None."""
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, np.random.Generator):
        return np.random.SeedSequence(int(seed.integers(0, 2**63)))
    return np.random.SeedSequence(seed)


def child(root: np.random.SeedSequence, *key: int) -> np.random.SeedSequence:
    """Sequence addressed by ``key`` below ``root``; independent of call order."""
    return np.random.SeedSequence(root.entropy, spawn_key=tuple(root.spawn_key) + tuple(int(k) for k in key))


def child_rng(root: np.random.SeedSequence, *key: int) -> np.random.Generator:
    return np.random.default_rng(child(root, *key))
