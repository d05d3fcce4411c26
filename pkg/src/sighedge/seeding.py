"""Deterministic seed derivation.

Every random quantity in the package is keyed by an integer seed and derived
substreams, so reruns and thread-parallel runs draw identical numbers.
"""
from __future__ import annotations

import numpy as np

# spawn-key namespaces for the datasets of one experiment
TRAIN, VALIDATION, TEST, PRICING, INIT, INNER = range(6)


def derive_seed(base: int, *keys: int) -> int:
    """Mix ``base`` with integer ``keys`` into a fresh 63-bit seed."""
    ss = np.random.SeedSequence(int(base), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def path_generator(seed: int, path_index: int) -> np.random.Generator:
    """Independent generator for one simulated path."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(path_index,))))
