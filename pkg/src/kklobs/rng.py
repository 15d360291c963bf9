"""Deterministic RNG streams derived from a single 64-bit run seed.

Every random draw in the package (weight init, trajectory sampling, batch
shuffling, noise injection, benchmark trials) comes from a Philox
counter-based generator whose key is derived from the run seed plus a
stable string/integer path. Identical (seed, path) always yields an
identical stream, independent of draw order elsewhere in the program.
"""

from __future__ import annotations

import zlib

import numpy as np


def _encode(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"rng path parts must be int or str, got {type(part).__name__}")


def derive(seed: int, *path) -> np.random.Generator:
    """Generator for the stream identified by ``(seed, *path)``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_encode(p) for p in path]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
