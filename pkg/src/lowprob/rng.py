"""Counter-based random streams.

Every stream is a Philox generator keyed by ``(root_seed, *keys)`` through
``numpy.random.SeedSequence``. Keys are small non-negative integers, usually
``(stage, token, worker)``, so any unit of work can be re-run on its own and
parallel workers never share a generator.
"""
from __future__ import annotations

import zlib

import numpy as np

STAGES = {
    "model": 1,
    "ground_truth": 2,
    "select": 3,
    "tune": 4,
    "estimate": 5,
    "evaluate": 6,
    "dist": 7,
}


def stage_key(name: str) -> int:
    """Stable integer for a stage or method name."""
    if name in STAGES:
        return STAGES[name]
    return zlib.crc32(name.encode("utf-8"))


def stream(root_seed: int, *keys: int | str) -> np.random.Generator:
    """Independent generator for ``(root_seed, *keys)``."""
    spawn_key = tuple(stage_key(k) if isinstance(k, str) else int(k) for k in keys)
    ss = np.random.SeedSequence(entropy=int(root_seed), spawn_key=spawn_key)
    return np.random.Generator(np.random.Philox(ss))


def as_generator(rng: np.random.Generator | int | None) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return stream(0 if rng is None else rng)
