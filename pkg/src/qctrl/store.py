"""Fixed-capacity waveform slot table addressed by index."""

from __future__ import annotations

import threading

import numpy as np

from .waveform import Waveform

DEFAULT_CAPACITY = 256


class StoreError(LookupError):
    pass


class SlotRangeError(StoreError):
    pass


class EmptySlotError(StoreError):
    pass


class WaveformStore:
    """Slots hold read-only copies, so readers never observe a partial write."""

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._slots: list[Waveform | None] = [None] * capacity
        self._lock = threading.Lock()

    def _check(self, slot: int) -> None:
        if not isinstance(slot, (int, np.integer)) or not 0 <= slot < self.capacity:
            raise SlotRangeError(f"slot {slot} outside 0..{self.capacity - 1}")

    def put(self, slot: int, w: Waveform) -> None:
        self._check(slot)
        samples = np.array(w.samples, dtype=np.float64, copy=True)
        samples.flags.writeable = False
        frozen = Waveform(samples, w.sample_rate, w.t0)
        with self._lock:
            self._slots[slot] = frozen

    def get(self, slot: int) -> Waveform:
        self._check(slot)
        with self._lock:
            w = self._slots[slot]
        if w is None:
            raise EmptySlotError(f"slot {slot} is empty")
        return w

    def occupied(self) -> list[int]:
        with self._lock:
            return [i for i, w in enumerate(self._slots) if w is not None]
