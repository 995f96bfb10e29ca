"""Named random streams derived from one top-level seed.

A stream is identified by a name ("datagen", "init", "split",
"batch-shuffle") plus optional integer keys (snapshot index, epoch), so any
component can be replayed on its own without consuming draws elsewhere.
"""

from __future__ import annotations

import os
import zlib

import numpy as np

STREAMS = ("datagen", "init", "split", "batch-shuffle")
SEED_ENV = "GRIDLEARN_SEED"


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError("seed must be non-negative")
    entropy = [int(seed), zlib.crc32(name.encode("utf-8")), *(int(k) for k in keys)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def seed_from_env(default: int | None = None) -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise ValueError(f"{SEED_ENV} must be an integer, got {raw!r}") from exc
