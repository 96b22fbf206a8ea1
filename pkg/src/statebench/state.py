"""Versioned world state: domain types, byte encodings and the store facade.

Every committed value is stamped with the (block, tx) position of the
transaction that wrote it. The facade turns any raw ordered key-value
backend into a versioned store with an atomically advanced savepoint.

Raw key layout::

    0x64 'd' | namespace | 0x00 | key      data entries
    0x73 's' | name                         internal entries (savepoint)
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Union

from statebench.errors import (
    BackendFailure,
    InvalidNamespace,
    MalformedValue,
    StaleHeight,
    StoreClosed,
)

U64_MAX = 2**64 - 1
VERSION_SIZE = 16
DATA_PREFIX = b"d"
INTERNAL_PREFIX = b"s"
SAVEPOINT_KEY = INTERNAL_PREFIX + b"savepoint"

_VERSION = struct.Struct(">QQ")


@dataclass(frozen=True, order=True)
class Version:
    block_num: int
    tx_num: int

    def __post_init__(self):
        for name in ("block_num", "tx_num"):
            v = getattr(self, name)
            if not isinstance(v, int) or not 0 <= v <= U64_MAX:
                raise ValueError(f"{name} must be an unsigned 64-bit int, got {v!r}")

    def __str__(self) -> str:
        return f"{self.block_num}.{self.tx_num}"


def _as_bytes(v: Union[bytes, str]) -> bytes:
    if isinstance(v, str):
        return v.encode("utf-8")
    return bytes(v)


@dataclass(frozen=True)
class CompositeKey:
    """A key scoped to a namespace. ``str`` parts are utf-8 encoded."""

    namespace: bytes
    key: bytes

    def __post_init__(self):
        object.__setattr__(self, "namespace", _as_bytes(self.namespace))
        object.__setattr__(self, "key", _as_bytes(self.key))
        if b"\x00" in self.namespace:
            raise InvalidNamespace(f"namespace {self.namespace!r} contains 0x00")


@dataclass(frozen=True)
class VersionedValue:
    value: bytes
    version: Version


def encode_version(v: Version) -> bytes:
    return _VERSION.pack(v.block_num, v.tx_num)


def decode_version(raw: bytes) -> Version:
    if len(raw) != VERSION_SIZE:
        raise MalformedValue(f"version encoding must be 16 bytes, got {len(raw)}")
    return Version(*_VERSION.unpack(raw))


def encode_versioned_value(vv: VersionedValue) -> bytes:
    return encode_version(vv.version) + vv.value


def decode_versioned_value(raw: bytes) -> VersionedValue:
    if len(raw) < VERSION_SIZE:
        raise MalformedValue(f"versioned value needs at least 16 bytes, got {len(raw)}")
    block_num, tx_num = _VERSION.unpack_from(raw)
    return VersionedValue(bytes(raw[VERSION_SIZE:]), Version(block_num, tx_num))


def namespace_prefix(namespace: Union[bytes, str]) -> bytes:
    ns = _as_bytes(namespace)
    if b"\x00" in ns:
        raise InvalidNamespace(f"namespace {ns!r} contains 0x00")
    return DATA_PREFIX + ns + b"\x00"


def encode_data_key(ck: CompositeKey) -> bytes:
    return namespace_prefix(ck.namespace) + ck.key


def decode_data_key(raw: bytes) -> CompositeKey:
    if raw[:1] != DATA_PREFIX:
        raise MalformedValue(f"not a data key: {raw[:16]!r}")
    sep = raw.find(b"\x00", 1)
    if sep < 0:
        raise MalformedValue("data key has no namespace separator")
    return CompositeKey(raw[1:sep], raw[sep + 1 :])


class UpdateBatch:
    """Namespace-grouped puts and deletes, applied as one commit.

    A value of ``None`` marks a delete. Re-inserting a key replaces the
    earlier entry; iteration follows first-insertion order.
    """

    def __init__(self):
        self.updates: dict[CompositeKey, Optional[VersionedValue]] = {}

    def put(self, ck: CompositeKey, value: bytes, version: Version) -> None:
        self.updates[ck] = VersionedValue(bytes(value), version)

    def delete(self, ck: CompositeKey) -> None:
        self.updates[ck] = None

    def get(self, ck: CompositeKey) -> Optional[VersionedValue]:
        return self.updates.get(ck)

    def __contains__(self, ck: CompositeKey) -> bool:
        return ck in self.updates

    def __len__(self) -> int:
        return len(self.updates)

    def __iter__(self):
        return iter(self.updates.items())

    def namespaces(self) -> list[bytes]:
        return sorted({ck.namespace for ck in self.updates})

    def __eq__(self, other) -> bool:
        if not isinstance(other, UpdateBatch):
            return NotImplemented
        return list(self.updates.items()) == list(other.updates.items())

    def __repr__(self) -> str:
        return f"UpdateBatch({len(self.updates)} entries)"


def _range_bounds(namespace, start_key, end_key) -> tuple[bytes, bytes]:
    prefix = namespace_prefix(namespace)
    start = prefix + _as_bytes(start_key or b"")
    if end_key is None:
        # 0x01 sorts right after the 0x00 separator: end of this namespace
        end = prefix[:-1] + b"\x01"
    else:
        end = prefix + _as_bytes(end_key)
    return start, end


class _Reader:
    """Read operations shared by the store and its snapshots."""

    _store: "VersionedStore"

    def _source(self):
        raise NotImplementedError

    def get(self, ck: CompositeKey) -> Optional[VersionedValue]:
        self._store._check_open()
        try:
            raw = self._source().get(encode_data_key(ck))
        except OSError as exc:
            raise BackendFailure(str(exc)) from exc
        if raw is None:
            return None
        return decode_versioned_value(raw)

    def range(
        self,
        namespace: Union[bytes, str],
        start_key: Union[bytes, str, None] = b"",
        end_key: Union[bytes, str, None] = None,
    ) -> Iterator[tuple[bytes, VersionedValue]]:
        """Yield ``(key, value)`` for ``start_key <= key < end_key`` in byte order.

        ``end_key=None`` runs to the end of the namespace.
        """
        self._store._check_open()
        start, end = _range_bounds(namespace, start_key, end_key)
        if end < start:
            raise ValueError("range start is after range end")
        skip = len(namespace_prefix(namespace))
        try:
            for raw_key, raw_val in self._source().iterator(start, end):
                yield raw_key[skip:], decode_versioned_value(raw_val)
        except OSError as exc:
            raise BackendFailure(str(exc)) from exc


class SnapshotView(_Reader):
    """Read handle pinned to the store contents at the time it was opened."""

    def __init__(self, store: "VersionedStore", raw_snapshot):
        self._store = store
        self._snap = raw_snapshot

    def _source(self):
        return self._snap


class VersionedStore(_Reader):
    """Versioned facade over a raw ordered key-value backend.

    Many threads may read; commits must be serialized by the caller, and
    are additionally guarded by an internal lock.
    """

    def __init__(
        self,
        raw,
        descriptor=None,
        *,
        sync: bool = True,
        options: Optional[dict] = None,
        on_close: Optional[Callable[["VersionedStore"], None]] = None,
    ):
        self._store = self
        self.raw = raw
        self.descriptor = descriptor
        self.sync = sync
        self.options = dict(options or {})
        self.bytes_written = 0
        self._on_close = on_close
        self._closed = False
        self._commit_lock = threading.Lock()
        self._savepoint = self._read_savepoint()

    def _source(self):
        return self.raw

    @property
    def closed(self) -> bool:
        return self._closed

    def _check_open(self) -> None:
        if self._closed:
            raise StoreClosed("store is closed")

    def _read_savepoint(self) -> Optional[Version]:
        try:
            raw = self.raw.get(SAVEPOINT_KEY)
        except OSError as exc:
            raise BackendFailure(str(exc)) from exc
        if raw is None:
            return None
        return decode_version(raw)

    def savepoint(self) -> Optional[Version]:
        self._check_open()
        return self._savepoint

    def snapshot(self) -> SnapshotView:
        self._check_open()
        return SnapshotView(self, self.raw.snapshot())

    def commit(self, batch: UpdateBatch, height: Version, *, sync: Optional[bool] = None) -> None:
        """Apply ``batch`` and move the savepoint to ``height`` in one raw batch."""
        from statebench.backends.base import RawBatch

        self._check_open()
        with self._commit_lock:
            if self._savepoint is not None and height <= self._savepoint:
                raise StaleHeight(f"commit height {height} is not above savepoint {self._savepoint}")
            raw_batch = RawBatch()
            for ck, vv in batch:
                if vv is None:
                    raw_batch.delete(encode_data_key(ck))
                else:
                    raw_batch.put(encode_data_key(ck), encode_versioned_value(vv))
            raw_batch.put(SAVEPOINT_KEY, encode_version(height))
            try:
                self.raw.apply(raw_batch, sync=self.sync if sync is None else sync)
            except OSError as exc:
                raise BackendFailure(str(exc)) from exc
            self._savepoint = height
            self.bytes_written += raw_batch.nbytes

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self.raw.close()
        finally:
            if self._on_close is not None:
                self._on_close(self)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
