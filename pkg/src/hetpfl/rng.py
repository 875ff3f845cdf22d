"""Named random streams derived from one master seed.

Each stream is keyed by a path of names/ints, e.g. ``stream(seed, "data",
"client", 3)``, so changing how one stream is consumed never shifts another.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part: str | int) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def stream(master_seed: int, *path: str | int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(_key(p) for p in path))
    return np.random.default_rng(ss)


def subseed(master_seed: int, *path: str | int) -> int:
    """A plain integer seed for APIs that want one."""
    return int(stream(master_seed, *path).integers(0, 2**31 - 1))
