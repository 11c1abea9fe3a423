"""Named random streams derived from a single root seed.

Every source of randomness in a run (weight init, prompt sampling, fixture
construction, ...) pulls from its own named stream so that adding a new
consumer never shifts the values drawn by an existing one.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_seed(root_seed: int, name: str) -> np.random.SeedSequence:
    """Derive a SeedSequence for ``name`` from ``root_seed``.

    The name is hashed with SHA-256 so the mapping is stable across runs,
    platforms, and Python hash randomization.
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.SeedSequence([int(root_seed) & 0xFFFFFFFFFFFFFFFF, *words])


def stream(root_seed: int, name: str) -> np.random.Generator:
    """A Generator seeded from the named stream."""
    return np.random.default_rng(stream_seed(root_seed, name))
