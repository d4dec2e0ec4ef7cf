"""Named random streams derived from one global seed.

``stream(seed, "rollout", 3, 1)`` always yields the same generator, and
different label paths yield statistically independent ones.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


def seed_sequence(seed: int, *labels) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), *(_key(x) for x in labels)])


def stream(seed: int, *labels) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, *labels))
