"""Named random sub-streams derived from one root seed.

Each component draws from ``substream(seed, name, ...)`` so that adding a
new consumer never shifts the numbers another one sees.
"""
from __future__ import annotations

import zlib

import numpy as np


def stream_key(name: str, *keys: int) -> list[int]:
    return [zlib.crc32(name.encode()), *(int(k) for k in keys)]


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=stream_key(name, *keys))
    return np.random.Generator(np.random.PCG64(ss))


def subseed(seed: int, name: str, *keys: int) -> int:
    """A 32-bit integer seed for components configured by an int."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=stream_key(name, *keys))
    return int(ss.generate_state(1, dtype=np.uint32)[0])
