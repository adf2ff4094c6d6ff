"""Deterministic random streams derived from a single root seed.

Every source of randomness in the package (synthetic data, weight init,
epoch shuffling, augmentation noise) pulls from a named substream so that
stages can be re-run independently without perturbing each other.
"""

from __future__ import annotations

import numpy as np

_STREAMS = {
    "synth": 1,
    "init": 2,
    "shuffle": 3,
    "augment": 4,
    "fold": 5,
}


def substream(seed: int, name: str, *indices: int) -> np.random.Generator:
    """Generator for a named stream; extra indices (fold, epoch, ...) fan out further."""
    try:
        stream_id = _STREAMS[name]
    except KeyError:
        raise ValueError(f"unknown rng stream {name!r}") from None
    if seed < 0:
        raise ValueError("root seed must be nonnegative")
    return np.random.default_rng([int(seed), stream_id, *(int(i) for i in indices)])


def child_seed(seed: int, name: str, *indices: int) -> int:
    """Derive a plain integer seed from a named substream."""
    return int(substream(seed, name, *indices).integers(0, 2**63 - 1))
