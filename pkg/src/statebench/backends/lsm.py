"""Log-structured merge tree backend.

Writes go to a checksummed write-ahead log and a sorted memtable. A full
memtable is flushed to an immutable sorted table; tables are merged in
tiers (``tier_fanout`` tables of one tier become one table of the next).
The MANIFEST file, replaced atomically by rename, names the live tables
and the current log.

Table file layout::

    values...  | index | footer
    index entry: u32 klen, key, u32 vlen (TOMBSTONE for deletes), u64 offset, u32 crc
    footer:      u64 index_off, u64 index_len, u32 count, u32 index_crc, 8-byte magic
"""

from __future__ import annotations

import bisect
import heapq
import json
import logging
import os
import struct
import threading
import weakref
import zlib
from pathlib import Path
from typing import Iterator, Optional

from statebench import faults
from statebench.backends.base import MISSING, KVBackend, RawBatch, SortedMap
from statebench.errors import BackendFailure

log = logging.getLogger(__name__)

DEFAULTS = {"memtable_bytes": 4 * 1024 * 1024, "tier_fanout": 4}

TOMBSTONE = 0xFFFFFFFF
SST_MAGIC = b"SBSST001"
_FOOTER = struct.Struct(">QQII8s")
_REC_HEAD = struct.Struct(">II")
_U32 = struct.Struct(">I")
_IDX_TAIL = struct.Struct(">IQI")


def _fsync_dir(path: Path) -> None:
    fd = os.open(path, os.O_RDONLY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


def encode_record(batch: RawBatch) -> bytes:
    parts = [_U32.pack(len(batch.entries))]
    for key, value in batch.entries:
        if value is None:
            parts += [b"\x00", _U32.pack(len(key)), key]
        else:
            parts += [b"\x01", _U32.pack(len(key)), key, _U32.pack(len(value)), value]
    payload = b"".join(parts)
    return _REC_HEAD.pack(len(payload), zlib.crc32(payload)) + payload


def decode_records(buf: bytes) -> tuple[list[list], int]:
    """Parse whole log records; returns them and the end offset of the last good one."""
    out = []
    pos = 0
    while pos + _REC_HEAD.size <= len(buf):
        length, crc = _REC_HEAD.unpack_from(buf, pos)
        start = pos + _REC_HEAD.size
        payload = buf[start : start + length]
        if len(payload) < length or zlib.crc32(payload) != crc:
            break
        entries = []
        (count,) = _U32.unpack_from(payload, 0)
        p = 4
        for _ in range(count):
            op = payload[p]
            (klen,) = _U32.unpack_from(payload, p + 1)
            p += 5
            key = bytes(payload[p : p + klen])
            p += klen
            if op:
                (vlen,) = _U32.unpack_from(payload, p)
                p += 4
                entries.append((key, bytes(payload[p : p + vlen])))
                p += vlen
            else:
                entries.append((key, None))
        out.append(entries)
        pos = start + length
    return out, pos


class Table:
    """An open, immutable sorted table. The fd closes when the object dies."""

    def __init__(self, path: Path, seq: int, level: int):
        self.path = path
        self.seq = seq
        self.level = level
        self.fd = os.open(path, os.O_RDONLY)
        self._finalizer = weakref.finalize(self, os.close, self.fd)
        try:
            self._load_index()
        except Exception:
            self._finalizer()
            raise

    def _load_index(self) -> None:
        size = os.fstat(self.fd).st_size
        if size < _FOOTER.size:
            raise BackendFailure(f"table {self.path.name} is truncated")
        index_off, index_len, count, index_crc, magic = _FOOTER.unpack(
            os.pread(self.fd, _FOOTER.size, size - _FOOTER.size)
        )
        if magic != SST_MAGIC or index_off + index_len + _FOOTER.size != size:
            raise BackendFailure(f"table {self.path.name} has a bad footer")
        raw = os.pread(self.fd, index_len, index_off)
        if zlib.crc32(raw) != index_crc:
            raise BackendFailure(f"table {self.path.name} index checksum mismatch")
        keys, lens, offs, crcs = [], [], [], []
        p = 0
        for _ in range(count):
            (klen,) = _U32.unpack_from(raw, p)
            p += 4
            keys.append(raw[p : p + klen])
            p += klen
            vlen, off, crc = _IDX_TAIL.unpack_from(raw, p)
            p += _IDX_TAIL.size
            lens.append(vlen)
            offs.append(off)
            crcs.append(crc)
        self.keys, self.lens, self.offs, self.crcs = keys, lens, offs, crcs
        self.size = size

    def value(self, i: int) -> Optional[bytes]:
        n = self.lens[i]
        if n == TOMBSTONE:
            return None
        data = os.pread(self.fd, n, self.offs[i])
        if len(data) != n or zlib.crc32(data) != self.crcs[i]:
            raise BackendFailure(f"table {self.path.name} value checksum mismatch")
        return data

    def lookup(self, key: bytes):
        i = bisect.bisect_left(self.keys, key)
        if i < len(self.keys) and self.keys[i] == key:
            return self.value(i)
        return MISSING

    def span(self, start: bytes, end: Optional[bytes]) -> range:
        lo = bisect.bisect_left(self.keys, start)
        hi = len(self.keys) if end is None else bisect.bisect_left(self.keys, end)
        return range(lo, hi)

    def close(self) -> None:
        self._finalizer()


class TableWriter:
    def __init__(self, path: Path, fault_name: str):
        self.path = path
        self.fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o644)
        self.fault_name = fault_name
        self.off = 0
        self.index: list[bytes] = []
        self.count = 0
        self._buf: list[bytes] = []
        self._buffered = 0

    def add(self, key: bytes, value: Optional[bytes]) -> None:
        if value is None:
            self.index.append(_U32.pack(len(key)) + key + _IDX_TAIL.pack(TOMBSTONE, 0, 0))
        else:
            self.index.append(
                _U32.pack(len(key)) + key + _IDX_TAIL.pack(len(value), self.off + self._buffered, zlib.crc32(value))
            )
            self._buf.append(value)
            self._buffered += len(value)
            if self._buffered >= 1 << 20:
                self._drain()
        self.count += 1

    def _drain(self) -> None:
        if self._buf:
            data = b"".join(self._buf)
            faults.write_at(self.fd, data, self.off, self.fault_name)
            self.off += len(data)
            self._buf, self._buffered = [], 0

    def finish(self) -> None:
        self._drain()
        index = b"".join(self.index)
        footer = _FOOTER.pack(self.off, len(index), self.count, zlib.crc32(index), SST_MAGIC)
        faults.write_at(self.fd, index + footer, self.off, self.fault_name)
        os.fsync(self.fd)
        os.close(self.fd)


class LSMSnapshot:
    def __init__(self, mem: SortedMap, tables: tuple[Table, ...]):
        self._mem = mem
        self._tables = tables

    def get(self, key: bytes) -> Optional[bytes]:
        v = self._mem.lookup(key)
        if v is not MISSING:
            return v
        for t in self._tables:
            v = t.lookup(key)
            if v is not MISSING:
                return v
        return None

    def iterator(self, start: bytes = b"", end: Optional[bytes] = None) -> Iterator[tuple[bytes, bytes]]:
        for key, value in merge_sources(self._mem, self._tables, start, end):
            if value is not None:
                yield key, value


def merge_sources(mem: Optional[SortedMap], tables, start: bytes, end: Optional[bytes]):
    """Newest-wins merge of a memtable and tables; yields tombstones as ``None``."""

    def mem_src():
        for k, v in mem.items(start, end):
            yield k, 0, None, v

    def table_src(prio, t):
        for i in t.span(start, end):
            yield t.keys[i], prio, t, i

    sources = [] if mem is None else [mem_src()]
    sources += [table_src(p, t) for p, t in enumerate(tables, start=1)]
    last = None
    for key, _prio, table, arg in heapq.merge(*sources, key=lambda e: (e[0], e[1])):
        if key == last:
            continue
        last = key
        yield key, (arg if table is None else table.value(arg))


class LSMBackend(KVBackend):
    def __init__(self, path, memtable_bytes: int = DEFAULTS["memtable_bytes"], tier_fanout: int = DEFAULTS["tier_fanout"]):
        if tier_fanout < 2:
            raise ValueError("tier_fanout must be >= 2")
        self.path = Path(path)
        self.memtable_bytes = memtable_bytes
        self.tier_fanout = tier_fanout
        self._lock = threading.Lock()
        self._write_lock = threading.Lock()
        self._shared: "weakref.WeakSet[LSMSnapshot]" = weakref.WeakSet()
        self._mem = SortedMap()
        self._tables: tuple[Table, ...] = ()
        self._wal_fd = -1
        self._closed = False
        try:
            self._open()
        except OSError as exc:
            raise BackendFailure(f"cannot open LSM store at {self.path}: {exc}") from exc

    # -- recovery ---------------------------------------------------------

    def _open(self) -> None:
        self.path.mkdir(parents=True, exist_ok=True)
        manifest = self.path / "MANIFEST"
        if not manifest.exists():
            self._wal_num = 1
            self._next_file = 2
            self._create_wal(self._wal_num)
            self._write_manifest([], stage="init")
        else:
            try:
                state = json.loads(manifest.read_text())
                self._wal_num = state["wal"]
                self._next_file = state["next_file"]
                entries = state["tables"]
            except (ValueError, KeyError) as exc:
                raise BackendFailure(f"corrupt MANIFEST in {self.path}: {exc}") from exc
            tables = [Table(self.path / e["file"], e["seq"], e["level"]) for e in entries]
            self._tables = tuple(sorted(tables, key=lambda t: -t.seq))
        self._remove_orphans()
        self._replay_wal()

    def _remove_orphans(self) -> None:
        live = {t.path.name for t in self._tables} | {"MANIFEST", self._wal_name(self._wal_num)}
        for p in self.path.iterdir():
            if p.name not in live and p.suffix in (".sst", ".wal", ".tmp"):
                log.debug("removing orphan %s", p)
                p.unlink()

    @staticmethod
    def _wal_name(num: int) -> str:
        return f"{num:06d}.wal"

    def _create_wal(self, num: int) -> None:
        fd = os.open(self.path / self._wal_name(num), os.O_RDWR | os.O_CREAT | os.O_TRUNC, 0o644)
        os.fsync(fd)
        os.close(fd)
        _fsync_dir(self.path)

    def _replay_wal(self) -> None:
        wal = self.path / self._wal_name(self._wal_num)
        if not wal.exists():
            self._create_wal(self._wal_num)
        fd = os.open(wal, os.O_RDWR)
        size = os.fstat(fd).st_size
        buf = os.pread(fd, size, 0) if size else b""
        records, good = decode_records(buf)
        if good < size:
            log.info("truncating torn log tail in %s (%d bytes)", wal, size - good)
            os.ftruncate(fd, good)
            os.fsync(fd)
        for entries in records:
            for key, value in entries:
                self._mem.set(key, value)
        self._wal_fd = fd
        self._wal_off = good

    def _write_manifest(self, tables, stage: str) -> None:
        state = {
            "wal": self._wal_num,
            "next_file": self._next_file,
            "tables": [{"file": t.path.name, "seq": t.seq, "level": t.level} for t in tables],
        }
        data = json.dumps(state, indent=1).encode()
        tmp = self.path / "MANIFEST.tmp"
        fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o644)
        try:
            faults.write_at(fd, data, 0, f"lsm.{stage}.manifest")
            os.fsync(fd)
        finally:
            os.close(fd)
        faults.point(f"lsm.{stage}.before_rename")
        os.replace(tmp, self.path / "MANIFEST")
        _fsync_dir(self.path)
        faults.point(f"lsm.{stage}.after_rename")

    # -- reads --------------------------------------------------------------

    def _check(self) -> None:
        if self._closed:
            raise BackendFailure("LSM store is closed")

    def get(self, key: bytes) -> Optional[bytes]:
        self._check()
        with self._lock:
            v = self._mem.lookup(key)
            tables = self._tables
        if v is not MISSING:
            return v
        for t in tables:
            v = t.lookup(key)
            if v is not MISSING:
                return v
        return None

    def snapshot(self) -> LSMSnapshot:
        self._check()
        with self._lock:
            snap = LSMSnapshot(self._mem, self._tables)
            self._shared.add(snap)
        return snap

    def iterator(self, start: bytes = b"", end: Optional[bytes] = None):
        return self.snapshot().iterator(start, end)

    # -- writes -------------------------------------------------------------

    def apply(self, batch: RawBatch, sync: bool = True) -> None:
        self._check()
        if not batch.entries:
            return
        with self._write_lock:
            record = encode_record(batch)
            faults.point("lsm.wal.before_append")
            faults.write_at(self._wal_fd, record, self._wal_off, "lsm.wal.append")
            self._wal_off += len(record)
            faults.point("lsm.wal.after_append")
            if sync:
                os.fsync(self._wal_fd)
            faults.point("lsm.wal.after_sync")
            with self._lock:
                mem = self._mem
                if any(s._mem is mem for s in self._shared):
                    mem = mem.copy()
                for key, value in batch.entries:
                    mem.set(key, value)
                self._mem = mem
            faults.point("lsm.memtable.applied")
            if self._mem.nbytes >= self.memtable_bytes:
                self._flush()

    def _flush(self) -> None:
        num = self._next_file
        path = self.path / f"{num:06d}.sst"
        writer = TableWriter(path, "lsm.flush.sst")
        for key, value in self._mem.items(b"", None):
            writer.add(key, value)
        writer.finish()
        faults.point("lsm.flush.sst_written")
        table = Table(path, num, 0)
        old_wal, old_fd = self._wal_num, self._wal_fd
        self._wal_num = num + 1
        self._next_file = num + 2
        self._create_wal(self._wal_num)
        tables = (table,) + self._tables
        self._write_manifest(tables, stage="flush")
        new_fd = os.open(self.path / self._wal_name(self._wal_num), os.O_RDWR)
        with self._lock:
            self._tables = tables
            self._mem = SortedMap()
            self._wal_fd, self._wal_off = new_fd, 0
        os.close(old_fd)
        os.unlink(self.path / self._wal_name(old_wal))
        faults.point("lsm.flush.done")
        self._maybe_compact()

    def _maybe_compact(self) -> None:
        while True:
            by_level: dict[int, list[Table]] = {}
            for t in self._tables:
                by_level.setdefault(t.level, []).append(t)
            full = [lvl for lvl, ts in sorted(by_level.items()) if len(ts) >= self.tier_fanout]
            if not full:
                return
            self._compact(full[0], by_level[full[0]])

    def _compact(self, level: int, inputs: list[Table]) -> None:
        inputs = sorted(inputs, key=lambda t: -t.seq)
        drop_tombstones = len(inputs) == len(self._tables)
        num = self._next_file
        self._next_file = num + 1
        path = self.path / f"{num:06d}.sst"
        writer = TableWriter(path, "lsm.compact.sst")
        for key, value in merge_sources(None, inputs, b"", None):
            if value is None and drop_tombstones:
                continue
            writer.add(key, value)
        writer.finish()
        faults.point("lsm.compact.sst_written")
        out = Table(path, num, level + 1)
        gone = {id(t) for t in inputs}
        tables = tuple(sorted([t for t in self._tables if id(t) not in gone] + [out], key=lambda t: -t.seq))
        self._write_manifest(tables, stage="compact")
        with self._lock:
            self._tables = tables
        for t in inputs:
            # open snapshots keep reading through their fd after the unlink
            os.unlink(t.path)
        faults.point("lsm.compact.done")
        log.debug("compacted %d tables of level %d into %s", len(inputs), level, path.name)

    def close(self) -> None:
        if self._closed:
            return
        with self._write_lock:
            self._closed = True
            if self._wal_fd >= 0:
                os.close(self._wal_fd)
                self._wal_fd = -1
            # table fds close once no snapshot references them
            with self._lock:
                self._tables = ()
                self._mem = SortedMap()

    @property
    def table_levels(self) -> list[int]:
        return [t.level for t in self._tables]


def open_lsm(path, **options) -> LSMBackend:
    return LSMBackend(path, **options)
