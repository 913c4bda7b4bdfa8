"""Seed derivation and the pinned random generator.

All randomness goes through numpy's Philox4x64 counter-based generator.
Child seeds are the first 8 bytes (little-endian) of
``blake2b(f"{master}:{tag}:{i0}:{i1}...", digest_size=8)``, so any
implementation with Philox and BLAKE2b can reproduce the streams.
"""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, tag: str, *index: int) -> int:
    key = ":".join([str(int(master)), tag, *(str(int(i)) for i in index)])
    digest = hashlib.blake2b(key.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))
