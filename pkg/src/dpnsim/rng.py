"""Named random substreams derived from one root seed."""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, label: str) -> np.random.Generator:
    """Independent generator for ``label``.

    The label is hashed into the spawn key, so adding or removing a consumer
    of one stream never shifts the draws seen by another.
    """
    key = zlib.crc32(label.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(key,))))


class Streams:
    def __init__(self, seed: int):
        self.seed = int(seed)
        self._cache: dict[str, np.random.Generator] = {}

    def __getitem__(self, label: str) -> np.random.Generator:
        if label not in self._cache:
            self._cache[label] = substream(self.seed, label)
        return self._cache[label]
