"""Deterministic RNG derivation.

Every random decision in the toolkit draws from a generator derived here, so
a single integer seed plus a tuple of string tags fully determines behaviour.
Tags are hashed with BLAKE2b (not Python's salted ``hash``), which keeps
streams stable across processes and platforms and lets independent walks,
renders, and dropout masks own disjoint substreams.
"""
from __future__ import annotations

import hashlib

import numpy as np


def stable_hash64(*parts: object) -> int:
    """64-bit stable hash of the string forms of ``parts``."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(str(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def derive_rng(seed: int, *tags: object) -> np.random.Generator:
    """A PCG64 generator keyed by (seed, *tags)."""
    return np.random.Generator(np.random.PCG64(stable_hash64(seed, *tags)))
