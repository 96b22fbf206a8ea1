"""Copy-on-write B+tree backend.

The file is append-only after a 4 KiB header that holds two meta slots.
A commit appends the rewritten root-to-leaf paths (and any large values)
at the end of the file, syncs, then writes the meta record into the slot
not used by the previous commit. Opening picks the valid meta with the
highest transaction id, so a torn commit falls back to the previous tree.
Old nodes are never modified, which makes every root a free snapshot.

Pointers carry the CRC of the bytes they point to, so a node or value
is verified by its parent before use.

Node layout::

    leaf:     'L' u16 count, then per entry u16 klen, key, u8 kind,
              kind 0: u32 vlen, value     kind 1: u64 off, u32 len, u32 crc
    internal: 'I' u16 nchildren, per child u64 off, u32 len, u32 crc,
              then nchildren-1 separators as u16 klen, key
"""

from __future__ import annotations

import bisect
import os
import struct
import threading
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import NamedTuple, Optional, Union

from statebench import faults
from statebench.backends.base import KVBackend, RawBatch
from statebench.errors import BackendFailure

DEFAULTS = {"max_entries": 64, "inline_limit": 256, "cache_nodes": 4096}

META_MAGIC = b"SBBTREE1"
HEADER_SIZE = 4096
META_SLOT = 64
_META = struct.Struct(">8sQQIIQ")  # magic, txid, root_off, root_len, root_crc, end
_PTR = struct.Struct(">QII")
_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
MAX_KEY = 0xFFFF


class Ptr(NamedTuple):
    off: int
    length: int
    crc: int


class Blob(NamedTuple):
    """Out-of-line value reference held in a leaf."""

    off: int
    length: int
    crc: int


class Node:
    __slots__ = ("leaf", "keys", "items")

    def __init__(self, leaf: bool, keys: list, items: list):
        self.leaf = leaf
        self.keys = keys
        # leaf: values (bytes or Blob); internal: children (Ptr or dirty Node)
        self.items = items

    def copy(self) -> "Node":
        return Node(self.leaf, list(self.keys), list(self.items))


def encode_node(node: Node) -> bytes:
    if node.leaf:
        parts = [b"L", _U16.pack(len(node.keys))]
        for key, val in zip(node.keys, node.items):
            parts += [_U16.pack(len(key)), key]
            if isinstance(val, Blob):
                parts += [b"\x01", _PTR.pack(*val)]
            else:
                parts += [b"\x00", _U32.pack(len(val)), val]
    else:
        parts = [b"I", _U16.pack(len(node.items))]
        parts += [_PTR.pack(*p) for p in node.items]
        for key in node.keys:
            parts += [_U16.pack(len(key)), key]
    return b"".join(parts)


def decode_node(buf: bytes) -> Node:
    kind = buf[:1]
    (n,) = _U16.unpack_from(buf, 1)
    p = 3
    keys: list[bytes] = []
    items: list = []
    if kind == b"L":
        for _ in range(n):
            (klen,) = _U16.unpack_from(buf, p)
            p += 2
            keys.append(buf[p : p + klen])
            p += klen
            if buf[p]:
                items.append(Blob(*_PTR.unpack_from(buf, p + 1)))
                p += 1 + _PTR.size
            else:
                (vlen,) = _U32.unpack_from(buf, p + 1)
                p += 5
                items.append(buf[p : p + vlen])
                p += vlen
        return Node(True, keys, items)
    if kind == b"I":
        for _ in range(n):
            items.append(Ptr(*_PTR.unpack_from(buf, p)))
            p += _PTR.size
        for _ in range(n - 1):
            (klen,) = _U16.unpack_from(buf, p)
            p += 2
            keys.append(buf[p : p + klen])
            p += klen
        return Node(False, keys, items)
    raise BackendFailure(f"unknown node type {kind!r}")


class _Reader:
    """Tree reads against a fixed root."""

    def __init__(self, tree: "BTreeBackend", root: Optional[Ptr]):
        self._tree = tree
        self._root = root

    def get(self, key: bytes) -> Optional[bytes]:
        if self._root is None:
            return None
        node = self._tree._load(self._root)
        while not node.leaf:
            node = self._tree._load(node.items[bisect.bisect_right(node.keys, key)])
        i = bisect.bisect_left(node.keys, key)
        if i < len(node.keys) and node.keys[i] == key:
            return self._tree._value(node.items[i])
        return None

    def iterator(self, start: bytes = b"", end: Optional[bytes] = None):
        if self._root is None:
            return
        yield from self._walk(self._root, start, end)

    def _walk(self, ptr: Ptr, start: bytes, end: Optional[bytes]):
        node = self._tree._load(ptr)
        if node.leaf:
            for i in range(bisect.bisect_left(node.keys, start), len(node.keys)):
                key = node.keys[i]
                if end is not None and key >= end:
                    return
                yield key, self._tree._value(node.items[i])
            return
        first = bisect.bisect_right(node.keys, start)
        for i in range(first, len(node.items)):
            # child i holds keys >= keys[i-1]
            if i > 0 and end is not None and node.keys[i - 1] >= end:
                return
            yield from self._walk(node.items[i], start, end)


class BTreeBackend(KVBackend):
    def __init__(
        self,
        path,
        max_entries: int = DEFAULTS["max_entries"],
        inline_limit: int = DEFAULTS["inline_limit"],
        cache_nodes: int = DEFAULTS["cache_nodes"],
    ):
        if max_entries < 3:
            raise ValueError("max_entries must be >= 3")
        self.path = Path(path)
        self.max_entries = max_entries
        self.inline_limit = inline_limit
        self.cache_nodes = cache_nodes
        self._cache: "OrderedDict[int, Node]" = OrderedDict()
        self._cache_lock = threading.Lock()
        self._lock = threading.Lock()
        self._write_lock = threading.Lock()
        self._closed = False
        try:
            self._open()
        except OSError as exc:
            raise BackendFailure(f"cannot open B+tree store at {self.path}: {exc}") from exc

    # -- file header --------------------------------------------------------

    def _open(self) -> None:
        self.path.mkdir(parents=True, exist_ok=True)
        fname = self.path / "btree.db"
        self._fd = os.open(fname, os.O_RDWR | os.O_CREAT, 0o644)
        if os.fstat(self._fd).st_size < HEADER_SIZE:
            self._txid = 0
            self._root: Optional[Ptr] = None
            self._end = HEADER_SIZE
            os.ftruncate(self._fd, HEADER_SIZE)
            for slot in (0, 1):
                self._write_meta(slot, 0, None, HEADER_SIZE, "btree.init.meta")
            os.fsync(self._fd)
            fd = os.open(self.path, os.O_RDONLY)
            os.fsync(fd)
            os.close(fd)
            return
        metas = [m for m in (self._read_meta(0), self._read_meta(1)) if m is not None]
        if not metas:
            os.close(self._fd)
            raise BackendFailure(f"{fname}: no valid meta record")
        txid, root, end = max(metas, key=lambda m: m[0])
        self._txid, self._root, self._end = txid, root, end
        # discard whatever a crashed commit appended past the last meta
        if os.fstat(self._fd).st_size > end:
            os.ftruncate(self._fd, end)

    def _read_meta(self, slot: int):
        raw = os.pread(self._fd, META_SLOT, slot * META_SLOT)
        if len(raw) < _META.size + 4:
            return None
        body = raw[: _META.size]
        (crc,) = _U32.unpack_from(raw, _META.size)
        if zlib.crc32(body) != crc:
            return None
        magic, txid, root_off, root_len, root_crc, end = _META.unpack(body)
        if magic != META_MAGIC:
            return None
        root = Ptr(root_off, root_len, root_crc) if root_len else None
        return txid, root, end

    def _write_meta(self, slot: int, txid: int, root: Optional[Ptr], end: int, fault: str) -> None:
        r = root or Ptr(0, 0, 0)
        body = _META.pack(META_MAGIC, txid, r.off, r.length, r.crc, end)
        faults.write_at(self._fd, body + _U32.pack(zlib.crc32(body)), slot * META_SLOT, fault)

    # -- node access ----------------------------------------------------------

    def _load(self, ptr: Union[Ptr, Node]) -> Node:
        if isinstance(ptr, Node):
            return ptr
        with self._cache_lock:
            node = self._cache.get(ptr.off)
            if node is not None:
                self._cache.move_to_end(ptr.off)
                return node
        try:
            buf = os.pread(self._fd, ptr.length, ptr.off)
        except OSError as exc:
            raise BackendFailure(str(exc)) from exc
        if len(buf) != ptr.length or zlib.crc32(buf) != ptr.crc:
            raise BackendFailure(f"node checksum mismatch at offset {ptr.off}")
        node = decode_node(buf)
        self._remember(ptr.off, node)
        return node

    def _remember(self, off: int, node: Node) -> None:
        with self._cache_lock:
            self._cache[off] = node
            if len(self._cache) > self.cache_nodes:
                self._cache.popitem(last=False)

    def _value(self, val) -> bytes:
        if not isinstance(val, Blob):
            return val
        data = os.pread(self._fd, val.length, val.off)
        if len(data) != val.length or zlib.crc32(data) != val.crc:
            raise BackendFailure(f"value checksum mismatch at offset {val.off}")
        return data

    # -- reads --------------------------------------------------------------

    def _check(self) -> None:
        if self._closed:
            raise BackendFailure("B+tree store is closed")

    def snapshot(self) -> _Reader:
        self._check()
        with self._lock:
            return _Reader(self, self._root)

    def get(self, key: bytes) -> Optional[bytes]:
        return self.snapshot().get(key)

    def iterator(self, start: bytes = b"", end: Optional[bytes] = None):
        return self.snapshot().iterator(start, end)

    # -- copy-on-write mutation ----------------------------------------------

    def _mutable(self, parent: Node, i: int) -> Node:
        child = parent.items[i]
        if isinstance(child, Node):
            return child
        node = self._load(child).copy()
        parent.items[i] = node
        return node

    def _insert(self, node: Node, key: bytes, value: bytes):
        if node.leaf:
            i = bisect.bisect_left(node.keys, key)
            if i < len(node.keys) and node.keys[i] == key:
                node.items[i] = value
            else:
                node.keys.insert(i, key)
                node.items.insert(i, value)
            if len(node.keys) <= self.max_entries:
                return None
            mid = len(node.keys) // 2
            right = Node(True, node.keys[mid:], node.items[mid:])
            del node.keys[mid:], node.items[mid:]
            return right.keys[0], right
        i = bisect.bisect_right(node.keys, key)
        split = self._insert(self._mutable(node, i), key, value)
        if split is None:
            return None
        sep, right = split
        node.keys.insert(i, sep)
        node.items.insert(i + 1, right)
        if len(node.items) <= self.max_entries:
            return None
        mid = len(node.items) // 2
        up = node.keys[mid - 1]
        right = Node(False, node.keys[mid:], node.items[mid:])
        del node.keys[mid - 1 :], node.items[mid:]
        return up, right

    def _delete(self, node: Node, key: bytes) -> bool:
        """Remove ``key`` (known present). Returns True if ``node`` became empty."""
        if node.leaf:
            i = bisect.bisect_left(node.keys, key)
            del node.keys[i], node.items[i]
            return not node.keys
        i = bisect.bisect_right(node.keys, key)
        if self._delete(self._mutable(node, i), key):
            del node.items[i]
            if node.keys:
                del node.keys[i - 1 if i > 0 else 0]
        return not node.items

    def _persist(self, node: Union[Node, Ptr], out: bytearray, written: list) -> Ptr:
        if isinstance(node, Ptr):
            return node
        if node.leaf:
            for i, val in enumerate(node.items):
                if isinstance(val, bytes) and len(val) > self.inline_limit:
                    node.items[i] = Blob(self._end + len(out), len(val), zlib.crc32(val))
                    out += val
        else:
            node.items = [self._persist(c, out, written) for c in node.items]
        data = encode_node(node)
        ptr = Ptr(self._end + len(out), len(data), zlib.crc32(data))
        out += data
        written.append((ptr.off, node))
        return ptr

    def apply(self, batch: RawBatch, sync: bool = True) -> None:
        self._check()
        if not batch.entries:
            return
        for key, _ in batch.entries:
            if len(key) > MAX_KEY:
                raise ValueError(f"B+tree keys are limited to {MAX_KEY} bytes")
        with self._write_lock:
            root: Optional[Node] = self._load(self._root).copy() if self._root else None
            for key, value in batch.entries:
                if value is None:
                    if root is None or _Reader(self, root).get(key) is None:
                        continue
                    if self._delete(root, key):
                        root = None
                    while root is not None and not root.leaf and len(root.items) == 1:
                        root = self._mutable(root, 0)
                else:
                    if root is None:
                        root = Node(True, [], [])
                    split = self._insert(root, key, value)
                    if split is not None:
                        sep, right = split
                        root = Node(False, [sep], [root, right])
            out = bytearray()
            written: list = []
            new_root = self._persist(root, out, written) if root is not None else None
            faults.point("btree.before_write")
            if out:
                faults.write_at(self._fd, bytes(out), self._end, "btree.data")
            faults.point("btree.after_write")
            if sync:
                os.fsync(self._fd)
            faults.point("btree.after_data_sync")
            txid = self._txid + 1
            end = self._end + len(out)
            self._write_meta(txid % 2, txid, new_root, end, "btree.meta")
            faults.point("btree.after_meta")
            if sync:
                os.fsync(self._fd)
            faults.point("btree.after_meta_sync")
            with self._lock:
                self._txid, self._root, self._end = txid, new_root, end
            for off, node in written:
                self._remember(off, node)

    def close(self) -> None:
        if self._closed:
            return
        with self._write_lock:
            self._closed = True
            os.close(self._fd)

    @property
    def file_size(self) -> int:
        return self._end


def open_btree(path, **options) -> BTreeBackend:
    return BTreeBackend(path, **options)
