"""Deterministic random streams.

Every random draw in the lab is taken from a generator derived from the
master seed plus an integer key, so that any draw can be reproduced in
isolation and parallel evaluation sees the same numbers as sequential.
"""

from __future__ import annotations

import numpy as np

# Stream tags keep unrelated consumers of the same master seed apart.
DATA = 1
INIT = 2
SHUFFLE = 3
TRAIN_MASK = 4
EVAL_MASK = 5
PROBE = 6
CHECK = 7

_MASK64 = (1 << 64) - 1


def derive(seed: int, *key: int) -> np.random.Generator:
    """Return a generator that is a pure function of ``(seed, *key)``."""
    seq = np.random.SeedSequence(int(seed) & _MASK64, spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(seq)
