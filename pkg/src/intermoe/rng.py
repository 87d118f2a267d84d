"""Seeded random streams.

All randomness comes from numpy's Philox4x64 counter-based generator, keyed
by ``(seed, stream name)``. Philox output and numpy's normal/uniform
transforms are platform independent, so a given seed reproduces the same
datasets and runs everywhere. OS entropy is never consulted.
"""
from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("data", "split", "init", "shuffle", "mask", "ablation")


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name`` under ``seed``."""
    key = zlib.crc32(name.encode("ascii"))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), key])))


def fork(rng: np.random.Generator, n: int) -> list:
    """Split ``rng`` into ``n`` deterministic child streams."""
    return [np.random.Generator(bg) for bg in rng.bit_generator.spawn(n)]
