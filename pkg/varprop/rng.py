"""Seeded random streams.

Every stream is a Philox generator keyed by a root seed and a tuple of small
integers (``SeedSequence`` spawn keys). A stream depends only on its own key,
so adding a layer, a width or a network to a sweep never perturbs the numbers
drawn for the others.
"""
from typing import Tuple

import numpy as np

# Roles, the last component of experiment-level keys.
NETWORK = 0
INPUTS = 1
CALIBRATION = 2
LOSS = 3
HELDOUT = 4
FEATURE_PICK = 5

# Layer streams live under their own branch of the network seed.
_LAYER_BRANCH = 1
_LOSS_BRANCH = 2
_ORACLE_BRANCH = 3

EXPERIMENT_KEYS = {
    "theory": 0,
    "finite-width": 1,
    "gradients": 2,
    "init-check": 3,
    "distributions": 4,
}


def generator(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for ``(seed, key)``."""
    sequence = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(sequence))


def derive_seed(seed: int, *key: int) -> int:
    """Derive a 64-bit child seed, e.g. the seed of one network in an ensemble."""
    sequence = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def experiment_seed(master_seed: int, experiment: str, width: int, index: int, role: int, *extra: int) -> int:
    """Seed for one (experiment, width, network-index, role) work item."""
    return derive_seed(master_seed, EXPERIMENT_KEYS[experiment], width, index, role, *extra)


def layer_generator(seed: int, layer: int) -> np.random.Generator:
    return generator(seed, _LAYER_BRANCH, layer)


def loss_generator(seed: int) -> np.random.Generator:
    return generator(seed, _LOSS_BRANCH)


def oracle_generator(seed: int) -> np.random.Generator:
    return generator(seed, _ORACLE_BRANCH)


def gaussian_batch(seed: int, shape: Tuple[int, int]) -> np.ndarray:
    """IID standard-normal input batch (samples by features)."""
    return generator(seed).standard_normal(shape)
