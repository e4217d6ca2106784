"""Seeded counter-based random streams.

Every stream is a numpy ``Generator`` over Philox4x64-10, keyed by
``SeedSequence(seed, spawn_key=(crc32(name),))``. Philox is counter based
with fixed published round constants, so a (seed, name) pair reproduces the
same draws on any platform for a given numpy release.
"""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("data", "init", "mask", "augment")


def stream(seed: int, name: str) -> np.random.Generator:
    """Named substream derived from the run seed."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(name.encode("utf-8")),))
    return np.random.Generator(np.random.Philox(ss))


def get_state(gen: np.random.Generator) -> dict:
    """JSON-serializable snapshot of a generator's position."""
    return _to_json(gen.bit_generator.state)


def set_state(gen: np.random.Generator, state: dict) -> None:
    raw = dict(state)
    inner = {k: np.array(v, dtype=np.uint64) for k, v in raw["state"].items()}
    raw["state"] = inner
    raw["buffer"] = np.array(raw["buffer"], dtype=np.uint64)
    gen.bit_generator.state = raw


def from_state(state: dict) -> np.random.Generator:
    gen = np.random.Generator(np.random.Philox(0))
    set_state(gen, state)
    return gen


def _to_json(value):
    if isinstance(value, dict):
        return {k: _to_json(v) for k, v in value.items()}
    if isinstance(value, np.ndarray):
        return [int(x) for x in value.tolist()]
    if isinstance(value, np.integer):
        return int(value)
    return value
