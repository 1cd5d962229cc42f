"""Deterministic seed derivation.

Every stage of the pipeline draws its randomness from a substream seed
derived from one master seed plus a tag path (stage name, level, image
index, ...). The derivation hashes the tags with BLAKE2b, so it is stable
across processes, platforms and Python versions, and any stage can be
re-run in isolation by rebuilding its seed from the same tags.
"""
from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_seed", "rng_for"]


def derive_seed(master: int, *tags) -> int:
    """Derive a 64-bit substream seed from ``master`` and a tag path."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master)).encode())
    for tag in tags:
        h.update(b"/")
        h.update(str(tag).encode())
    return int.from_bytes(h.digest(), "little")


def rng_for(master: int, *tags) -> np.random.Generator:
    """Generator seeded by :func:`derive_seed` of the same arguments."""
    return np.random.default_rng(derive_seed(master, *tags))
