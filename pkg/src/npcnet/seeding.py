"""Named random streams derived from one root seed.

Each purpose ("split", "init", "triplets/epoch-3", ...) gets its own generator so
that drawing more numbers for one purpose never shifts another.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def derive_seed(root: int, *names: str | int) -> np.random.SeedSequence:
    keys = [int(root) & 0xFFFFFFFFFFFFFFFF] + [_name_key(str(n)) for n in names]
    return np.random.SeedSequence(keys)


def rng_for(root: int, *names: str | int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *names))
