"""Bounded FIFO store of the most recent target records.

The bank keeps raw feature vectors only; entropies and probabilities are
recomputed at query time so references always reflect the current model,
which is what lets more bank entries become stable as adaptation proceeds.
"""

from __future__ import annotations

from collections import deque
from typing import Iterable

from .data import VideoRecord


class MemoryBank:
    """FIFO buffer of up to ``capacity`` records, oldest first."""

    def __init__(self, capacity: int, modality_dims: tuple[int, int, int]):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.modality_dims = modality_dims
        self._entries: deque[VideoRecord] = deque(maxlen=capacity)
        self._inserted = 0

    def insert_batch(self, records: Iterable[VideoRecord]) -> None:
        for rec in records:
            if rec.dims() != self.modality_dims:
                raise ValueError(
                    f"record {rec.id!r} dims {rec.dims()} do not match bank "
                    f"dims {self.modality_dims}")
            self._entries.append(rec)
            self._inserted += 1

    def scan(self) -> tuple[VideoRecord, ...]:
        """Snapshot of current entries, oldest to newest."""
        return tuple(self._entries)

    @property
    def inserted_total(self) -> int:
        return self._inserted

    def __len__(self) -> int:
        return len(self._entries)
