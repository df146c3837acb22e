"""Named random streams derived from one root seed.

Every stage draws from its own stream (``simulate``, ``bias``, ``init``,
``shuffle``...) so stages can be rerun independently and still reproduce.
Per-record streams use Philox with the record index in the counter, which
makes generation independent of ordering and worker count.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(_key(name),)))


def record_stream(seed: int, name: str, index: int) -> np.random.Generator:
    key = np.random.SeedSequence(int(seed), spawn_key=(_key(name),)).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=[0, int(index), 0, 0]))


def child_seed(seed: int, name: str) -> int:
    """Integer seed for a named sub-stage (e.g. one sweep cell)."""
    return int(np.random.SeedSequence(int(seed), spawn_key=(_key(name),)).generate_state(1, np.uint32)[0])
