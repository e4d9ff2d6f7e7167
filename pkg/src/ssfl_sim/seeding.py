"""Child-seed derivation.

Every random stream in a run is keyed by ``(master seed, purpose tag, *ints)``
so that results never depend on execution order or thread scheduling.
"""
from __future__ import annotations

import zlib

import numpy as np


def tag_code(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def derive_seed(master: int, tag: str, *keys: int) -> np.random.SeedSequence:
    entropy = [int(master) & 0xFFFFFFFF, tag_code(tag)] + [int(k) & 0xFFFFFFFF for k in keys]
    return np.random.SeedSequence(entropy)


def derive_rng(master: int, tag: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, tag, *keys))
