"""Counter-based seed derivation.

``derive_seed(seed, "split", 3)`` hashes the master seed together with a
path of labels, so independent streams (category choice, sample choice,
batch order, per-image corruption noise) never share state and can be
re-derived in any order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *path: object) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for part in path:
        h.update(b"/")
        h.update(str(part).encode())
    return int.from_bytes(h.digest(), "little") & 0x7FFF_FFFF_FFFF_FFFF


def rng(seed: int, *path: object) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *path)))
