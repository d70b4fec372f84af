"""Seedable, splittable random streams.

Every stochastic component draws from a Philox counter-based generator
whose key is derived from (seed, role, indices).  Streams for different
(role, index) pairs are statistically independent, so replicates and
perturbation draws can run in any order, or in parallel, and still
reproduce bit-identically.
"""

from __future__ import annotations

import numpy as np

RNG_ALGORITHM = "philox4x64"

_ROLES = {
    "dgp": 0,
    "perturb": 1,
    "folds": 2,
    "truth": 3,
    "test": 4,
}


def stream(seed: int, role: str = "dgp", *indices: int) -> np.random.Generator:
    """Return the generator for (seed, role, *indices).

    Deterministic: the same arguments always yield the same stream.
    """
    if role not in _ROLES:
        raise ValueError(f"unknown stream role {role!r}; expected one of {sorted(_ROLES)}")
    key = (_ROLES[role],) + tuple(int(i) for i in indices)
    ss = np.random.SeedSequence(int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def substream_seed(seed: int, role: str, *indices: int) -> int:
    """Derive a child seed, for components that take a seed rather than a stream."""
    if role not in _ROLES:
        raise ValueError(f"unknown stream role {role!r}; expected one of {sorted(_ROLES)}")
    key = (_ROLES[role],) + tuple(int(i) for i in indices)
    ss = np.random.SeedSequence(int(seed), spawn_key=key)
    return int(ss.generate_state(1, dtype=np.uint64)[0])
