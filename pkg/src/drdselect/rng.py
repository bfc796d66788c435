"""Named random substreams derived from a single master seed.

Every random draw in the package goes through :func:`substream`, keyed by the
master seed plus a tuple of stage names and integer indices.  No global RNG
state is ever touched, so results do not depend on call order, batching or
thread scheduling.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    part = int(part)
    if part < 0:
        raise ValueError(f"substream keys must be non-negative, got {part}")
    return part


def substream(seed: int, *keys) -> np.random.Generator:
    """Return an independent generator for ``(seed, *keys)``.

    Keys may be strings (hashed with CRC32) or non-negative integers.
    """
    entropy = [_key(seed)] + [_key(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
