"""Named random streams derived from a single integer seed."""
from __future__ import annotations

import hashlib

import numpy as np


def _label_key(label: str) -> list[int]:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


class SeedSplitter:
    """Hands out independent generators keyed by stream name.

    The same (seed, label) pair always yields the same stream, regardless of
    the order in which streams are requested.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def sequence(self, label: str) -> np.random.SeedSequence:
        return np.random.SeedSequence(entropy=self.seed, spawn_key=_label_key(label))

    def rng(self, label: str) -> np.random.Generator:
        return np.random.default_rng(self.sequence(label))

    def child(self, label: str) -> "SeedSplitter":
        state = self.sequence(label).generate_state(2, dtype=np.uint32)
        return SeedSplitter(int(state[0]) << 32 | int(state[1]))
