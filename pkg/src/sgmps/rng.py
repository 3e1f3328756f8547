"""Seeding.  All randomness flows from a (master, stream) pair through
numpy's SeedSequence into a PCG64 generator, which is bit-reproducible
across platforms for a fixed numpy major version."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngSeed:
    master: int
    stream: int = 0

    def __post_init__(self):
        for name in ("master", "stream"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or not 0 <= int(v) <= _MASK64:
                raise InvalidInput(f"{name} must be an unsigned 64-bit integer, got {v!r}")
            object.__setattr__(self, name, int(v))

    def child(self, *keys: int) -> "RngSeed":
        """Deterministic sub-stream, e.g. one per Monte Carlo replica."""
        ss = np.random.SeedSequence(entropy=self.master, spawn_key=(self.stream, *map(int, keys)))
        lo, hi = ss.generate_state(2, dtype=np.uint32)
        return RngSeed(self.master, (int(hi) << 32) | int(lo))

    def to_json(self):
        return {"master": self.master, "stream": self.stream}


def as_seed(seed) -> RngSeed:
    if isinstance(seed, RngSeed):
        return seed
    if isinstance(seed, dict):
        return RngSeed(seed["master"], seed.get("stream", 0))
    return RngSeed(int(seed))


def make_rng(seed) -> np.random.Generator:
    s = as_seed(seed)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=s.master, spawn_key=(s.stream,))))
