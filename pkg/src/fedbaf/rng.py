"""Named, seed-derived random streams.

Every consumer gets its own ``numpy.random.Generator`` keyed by
(master seed, purpose, *indices), so results do not depend on the order
in which clients are scheduled.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str, *indices: int) -> np.random.Generator:
    key = [int(seed) & 0xFFFFFFFF, _tag(purpose), *(int(i) for i in indices)]
    return np.random.default_rng(np.random.SeedSequence(key))
