"""Named random sub-streams derived from a single root seed.

Every consumer (graph layout, spawning, each ant, each sweep cell) gets its
own stream keyed by name, so adding a consumer never shifts the draws seen by
the others.
"""

from __future__ import annotations

import random
import zlib

import numpy as np


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def seed_sequence(root_seed: int, name: str, *index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(root_seed), spawn_key=(_key(name), *index))


def numpy_stream(root_seed: int, name: str, *index: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(root_seed, name, *index))


def python_stream(root_seed: int, name: str, *index: int) -> random.Random:
    """A ``random.Random`` stream; cheap scalar draws and a JSON-able state."""
    words = seed_sequence(root_seed, name, *index).generate_state(4, dtype=np.uint32)
    return random.Random(int.from_bytes(words.tobytes(), "little"))


def derive_seed(root_seed: int, name: str, *index: int) -> int:
    """A 63-bit integer seed for a child run (e.g. one sweep cell)."""
    words = seed_sequence(root_seed, name, *index).generate_state(2, dtype=np.uint32)
    return int.from_bytes(words.tobytes(), "little") >> 1
