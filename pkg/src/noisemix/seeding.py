"""Deterministic derivation of named child random streams from a master seed.

Every stochastic component of a run (data generation, weight init, training,
each sampling job) gets its own stream derived from the master seed plus a
stable string path, so streams never alias and runs reproduce exactly.
"""

from __future__ import annotations

import zlib

import numpy as np


def seed_sequence(master: int, *path: str | int) -> np.random.SeedSequence:
    """SeedSequence for the child stream identified by ``path``."""
    keys = [int(master)] + [zlib.crc32(str(p).encode("utf-8")) for p in path]
    return np.random.SeedSequence(keys)


def child_rng(master: int, *path: str | int) -> np.random.Generator:
    """Independent PCG64 generator for the child stream ``path``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(master, *path)))


def child_seed(master: int, *path: str | int) -> int:
    """64-bit integer seed for libraries that take plain seeds (e.g. torch)."""
    return int(seed_sequence(master, *path).generate_state(1, np.uint64)[0])
