"""Seeded random streams.

Trials are cut into fixed-size blocks and block ``b`` of stream
``(master_seed, stream_id, *path)`` always draws from the same generator,
so results never depend on how blocks are spread over workers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BLOCK_SIZE = 1 << 15

# child-stream tags; values are arbitrary but fixed forever
RESAMPLE = 0x5E5A
REPLICATE = 0x4E91
DOOB = 0xD00B
PAIR = 0x9A12


@dataclass(frozen=True)
class RngSpec:
    master_seed: int
    stream_id: int = 0
    path: tuple = ()

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2 ** 64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")

    def child(self, *keys):
        return RngSpec(self.master_seed, self.stream_id, self.path + tuple(int(k) for k in keys))

    def generator(self, block=0):
        seq = np.random.SeedSequence(int(self.master_seed),
                                     spawn_key=(int(self.stream_id), *self.path, int(block)))
        return np.random.Generator(np.random.PCG64(seq))

    def to_dict(self):
        return {"master_seed": int(self.master_seed), "stream_id": int(self.stream_id),
                "path": list(self.path)}


def as_rng(rng):
    if isinstance(rng, RngSpec):
        return rng
    if rng is None:
        return RngSpec(0)
    return RngSpec(int(rng))


def blocks(trials, size=BLOCK_SIZE):
    """(block index, start, stop) covering ``range(trials)``."""
    return [(b, s, min(s + size, trials)) for b, s in enumerate(range(0, trials, size))]
