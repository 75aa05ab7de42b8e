"""Per-sample random substreams.

Streams are keyed by (seed, epoch, sample index, purpose) so the draws a sample
receives never depend on batch composition or on how many draws other
purposes consumed.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np


def _purpose_key(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def substream(seed: int, *keys: int, purpose: str = "") -> np.random.Generator:
    """Generator for an arbitrary key path under ``seed``."""
    entropy = [int(seed) & 0xFFFFFFFF, *(int(k) & 0xFFFFFFFF for k in keys), _purpose_key(purpose)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass(frozen=True)
class BatchStreams:
    """Random streams for one batch: one generator per sample and purpose."""

    seed: int
    epoch: int
    indices: Sequence[int]

    def __len__(self) -> int:
        return len(self.indices)

    def sample(self, position: int, purpose: str) -> np.random.Generator:
        return substream(self.seed, self.epoch, int(self.indices[position]), purpose=purpose)

    def each(self, purpose: str) -> Iterator[np.random.Generator]:
        for position in range(len(self.indices)):
            yield self.sample(position, purpose)

    @classmethod
    def for_range(cls, seed: int, epoch: int, start: int, count: int) -> "BatchStreams":
        return cls(seed=seed, epoch=epoch, indices=tuple(range(start, start + count)))
