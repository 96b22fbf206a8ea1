"""In-memory backend. Not durable; serves as the oracle for the others."""

from __future__ import annotations

import threading
import weakref
from typing import Optional

from statebench.backends.base import MISSING, KVBackend, RawBatch, SortedMap


class MapSnapshot:
    def __init__(self, m: SortedMap):
        self._map = m

    def get(self, key: bytes) -> Optional[bytes]:
        v = self._map.lookup(key)
        return None if v is MISSING else v

    def iterator(self, start: bytes = b"", end: Optional[bytes] = None):
        return iter(self._map.items(start, end))


class MemoryBackend(KVBackend):
    def __init__(self):
        self._map = SortedMap()
        self._lock = threading.Lock()
        # snapshots share the live map until the next apply copies it
        self._shared: "weakref.WeakSet[MapSnapshot]" = weakref.WeakSet()

    def get(self, key: bytes) -> Optional[bytes]:
        with self._lock:
            v = self._map.lookup(key)
        return None if v is MISSING else v

    def apply(self, batch: RawBatch, sync: bool = True) -> None:
        if not batch.entries:
            return
        with self._lock:
            m = self._map
            if any(s._map is m for s in self._shared):
                m = m.copy()
            for key, value in batch.entries:
                if value is None:
                    m.discard(key)
                else:
                    m.set(key, value)
            self._map = m

    def iterator(self, start: bytes = b"", end: Optional[bytes] = None):
        with self._lock:
            items = self._map.items(start, end)
        return iter(items)

    def snapshot(self) -> MapSnapshot:
        with self._lock:
            snap = MapSnapshot(self._map)
            self._shared.add(snap)
        return snap

    def __len__(self) -> int:
        return len(self._map)


def open_memory(path=None, **_options) -> MemoryBackend:
    return MemoryBackend()
