"""Raw backend contract and shared in-memory building blocks."""

from __future__ import annotations

import bisect
import enum
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

Entry = tuple[bytes, Optional[bytes]]


class Family(enum.Enum):
    LSM_TREE = "LSM_TREE"
    B_PLUS_TREE = "B_PLUS_TREE"
    IN_MEMORY = "IN_MEMORY"


@dataclass(frozen=True)
class BackendDescriptor:
    name: str
    family: Family
    durable: bool
    factory: Callable = field(compare=False, repr=False)
    # tuning knobs the factory accepts, with their defaults
    defaults: dict = field(default_factory=dict, compare=False)
    description: str = field(default="", compare=False)


class RawBatch:
    """Ordered puts and deletes applied all-or-nothing. ``None`` means delete."""

    def __init__(self, entries: Optional[list[Entry]] = None):
        self.entries: list[Entry] = list(entries or [])

    def put(self, key: bytes, value: bytes) -> None:
        self.entries.append((bytes(key), bytes(value)))

    def delete(self, key: bytes) -> None:
        self.entries.append((bytes(key), None))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def nbytes(self) -> int:
        return sum(len(k) + (len(v) if v is not None else 0) for k, v in self.entries)

    def collapsed(self) -> list[Entry]:
        """Last write per key, in ascending key order."""
        last = dict(self.entries)
        return sorted(last.items())


class SortedMap:
    """A dict plus a sorted key list. Values may be ``None`` (tombstones)."""

    __slots__ = ("data", "keys", "nbytes")

    def __init__(self):
        self.data: dict[bytes, Optional[bytes]] = {}
        self.keys: list[bytes] = []
        self.nbytes = 0

    def set(self, key: bytes, value: Optional[bytes]) -> None:
        old = self.data.get(key, _MISSING)
        if old is _MISSING:
            bisect.insort(self.keys, key)
            self.nbytes += len(key)
        elif old is not None:
            self.nbytes -= len(old)
        self.data[key] = value
        if value is not None:
            self.nbytes += len(value)

    def discard(self, key: bytes) -> None:
        old = self.data.pop(key, _MISSING)
        if old is _MISSING:
            return
        del self.keys[bisect.bisect_left(self.keys, key)]
        self.nbytes -= len(key) + (len(old) if old is not None else 0)

    def lookup(self, key: bytes):
        """The stored value, ``None`` for a tombstone, or ``MISSING``."""
        return self.data.get(key, _MISSING)

    def items(self, start: bytes, end: Optional[bytes]) -> list[Entry]:
        lo = bisect.bisect_left(self.keys, start)
        hi = len(self.keys) if end is None else bisect.bisect_left(self.keys, end)
        data = self.data
        return [(k, data[k]) for k in self.keys[lo:hi]]

    def copy(self) -> "SortedMap":
        m = SortedMap()
        m.data = dict(self.data)
        m.keys = list(self.keys)
        m.nbytes = self.nbytes
        return m

    def __len__(self) -> int:
        return len(self.data)


class _Missing:
    def __repr__(self):
        return "MISSING"


_MISSING = MISSING = _Missing()


class KVBackend:
    """Ordered byte-string store. Subclasses implement the raw operations.

    ``iterator(start, end)`` covers ``[start, end)``; ``end=None`` is
    unbounded. ``snapshot()`` returns an object with ``get`` and
    ``iterator`` pinned to the current contents.
    """

    descriptor: BackendDescriptor

    def get(self, key: bytes) -> Optional[bytes]:
        raise NotImplementedError

    def apply(self, batch: RawBatch, sync: bool = True) -> None:
        raise NotImplementedError

    def iterator(self, start: bytes = b"", end: Optional[bytes] = None) -> Iterator[tuple[bytes, bytes]]:
        raise NotImplementedError

    def snapshot(self):
        raise NotImplementedError

    def close(self) -> None:
        pass
