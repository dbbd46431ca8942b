"""Seed splitting.

Every random stream derives from one integer seed through
``numpy.random.SeedSequence`` spawn keys, so a stream is addressed by a
path such as ``(seed, "task:ETTh1-96", "epoch", 3)`` rather than by the
order in which streams happen to be created:

    suite seed -> task (crc32 of the task id) -> purpose -> epoch -> batch

Strings in the path are mapped through crc32, integers are used as-is.
Parallel workers therefore draw identical numbers whatever the schedule.
"""
from __future__ import annotations

import zlib

import numpy as np

INIT = "init"
SHUFFLE = "shuffle"
NOISE = "noise"
SYNTH = "synth"


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def seed_sequence(seed: int, *path) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_key(p) for p in path))


def rng(seed: int, *path) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, *path))


def derive_seed(seed: int, *path) -> int:
    """A child seed (fits in u63) for handing a stream to another component."""
    hi, lo = (int(v) for v in seed_sequence(seed, *path).generate_state(2, np.uint32))
    return (hi << 31) ^ lo
