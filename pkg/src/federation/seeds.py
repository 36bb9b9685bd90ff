"""Named, counter-based random streams split from one master seed.

A stream is addressed by a name plus integer indices, e.g.
``("perturbation", client, round)``. Each address maps to its own
``SeedSequence`` spawn key, so adding a new consumer never shifts the
numbers any other stream produces.
"""

import zlib
from typing import Tuple

import numpy as np


class SeedStreams:
    """Factory of independent generators keyed by ``(name, *indices)``.

    Attributes:
        master_seed: Root entropy of the run.
    """

    def __init__(self, master_seed: int):
        if master_seed < 0:
            raise ValueError(f"Master seed must be non-negative, got {master_seed}")
        self.master_seed = int(master_seed)

    @staticmethod
    def _key(name: str, indices: Tuple[int, ...]) -> Tuple[int, ...]:
        return (zlib.crc32(name.encode("utf-8")),) + tuple(int(i) for i in indices)

    def sequence(self, name: str, *indices: int) -> np.random.SeedSequence:
        if any(int(i) < 0 for i in indices):
            raise ValueError(f"Stream indices must be non-negative: {name}{indices}")
        return np.random.SeedSequence(entropy=self.master_seed, spawn_key=self._key(name, indices))

    def generator(self, name: str, *indices: int) -> np.random.Generator:
        """Fresh Philox generator for the stream; same address, same numbers."""
        return np.random.Generator(np.random.Philox(self.sequence(name, *indices)))

    def seed(self, name: str, *indices: int) -> int:
        """A 63-bit integer seed for APIs that want an int."""
        return int(self.sequence(name, *indices).generate_state(1, dtype=np.uint64)[0]) >> 1
