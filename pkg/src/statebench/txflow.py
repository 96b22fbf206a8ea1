"""Simulate, validate, commit.

A transaction program is any callable taking a :class:`TxContext`. It runs
against a snapshot, and its reads and writes are recorded rather than
applied. Blocks of simulation results are then checked in order against
committed state overlaid with the writes of earlier valid transactions in
the same block, and the survivors are committed in one atomic batch.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional, Union

from statebench import faults
from statebench.errors import BackendFailure, HeightError, ProgramError, StaleHeight
from statebench.state import CompositeKey, SnapshotView, UpdateBatch, Version, VersionedStore

log = logging.getLogger(__name__)

Program = Callable[["TxContext"], Any]
Bytes = Union[bytes, str]


class TxFlag(enum.Enum):
    VALID = "VALID"
    MVCC_CONFLICT = "MVCC_CONFLICT"


@dataclass
class SimulationResult:
    # None in read_set marks "read and found absent"; None in write_set is a delete
    read_set: dict[CompositeKey, Optional[Version]] = field(default_factory=dict)
    write_set: dict[CompositeKey, Optional[bytes]] = field(default_factory=dict)
    response: Any = None


@dataclass
class Block:
    block_num: int
    transactions: list[SimulationResult]


@dataclass
class ValidationResult:
    block_num: int
    flags: list[TxFlag]
    batch: UpdateBatch

    @property
    def valid_count(self) -> int:
        return sum(f is TxFlag.VALID for f in self.flags)

    @property
    def invalid_count(self) -> int:
        return len(self.flags) - self.valid_count


class TxContext:
    """The state interface handed to a transaction program."""

    def __init__(self, view: SnapshotView):
        self._view = view
        self.result = SimulationResult()

    def _read(self, ck: CompositeKey) -> Optional[bytes]:
        vv = self._view.get(ck)
        if ck not in self.result.read_set:
            self.result.read_set[ck] = None if vv is None else vv.version
        return None if vv is None else vv.value

    def get(self, namespace: Bytes, key: Bytes) -> Optional[bytes]:
        ck = CompositeKey(namespace, key)
        writes = self.result.write_set
        if ck in writes:
            return writes[ck]
        return self._read(ck)

    def put(self, namespace: Bytes, key: Bytes, value: Bytes) -> None:
        ck = CompositeKey(namespace, key)
        self.result.write_set.pop(ck, None)
        self.result.write_set[ck] = value.encode() if isinstance(value, str) else bytes(value)

    def delete(self, namespace: Bytes, key: Bytes) -> None:
        ck = CompositeKey(namespace, key)
        self.result.write_set.pop(ck, None)
        self.result.write_set[ck] = None

    def range(self, namespace: Bytes, start: Bytes = b"", end: Optional[Bytes] = None) -> list[tuple[bytes, bytes]]:
        """Committed keys in ``[start, end)`` merged with this transaction's own writes.

        Only keys served from committed state enter the read set; keys
        inserted into the range by others are not detected.
        """
        probe = CompositeKey(namespace, b"")
        ns = probe.namespace
        lo = start.encode() if isinstance(start, str) else bytes(start)
        hi = end.encode() if isinstance(end, str) else end
        merged: dict[bytes, Optional[bytes]] = {}
        for key, vv in self._view.range(ns, lo, hi):
            ck = CompositeKey(ns, key)
            if ck in self.result.write_set:
                continue
            if ck not in self.result.read_set:
                self.result.read_set[ck] = vv.version
            merged[key] = vv.value
        for ck, value in self.result.write_set.items():
            if ck.namespace == ns and ck.key >= lo and (hi is None or ck.key < hi):
                merged[ck.key] = value
        return [(k, v) for k, v in sorted(merged.items()) if v is not None]


def simulate(view: SnapshotView, program: Program) -> SimulationResult:
    ctx = TxContext(view)
    try:
        ctx.result.response = program(ctx)
    except (ProgramError, BackendFailure):
        raise
    except Exception as exc:
        raise ProgramError(f"program {program!r} failed: {exc}") from exc
    return ctx.result


def _check_height(store: VersionedStore, block_num: int) -> None:
    sp = store.savepoint()
    if sp is not None and block_num <= sp.block_num:
        raise HeightError(f"block {block_num} is not above savepoint block {sp.block_num}")


def validate_block(store: VersionedStore, block: Block) -> ValidationResult:
    _check_height(store, block.block_num)
    committed: dict[CompositeKey, Optional[Version]] = {}
    # versions written by earlier valid transactions of this block; None = deleted
    effective: dict[CompositeKey, Optional[Version]] = {}
    flags: list[TxFlag] = []
    batch = UpdateBatch()

    def current(ck: CompositeKey) -> Optional[Version]:
        if ck in effective:
            return effective[ck]
        if ck not in committed:
            vv = store.get(ck)
            committed[ck] = None if vv is None else vv.version
        return committed[ck]

    for tx_num, tx in enumerate(block.transactions):
        ok = all(current(ck) == seen for ck, seen in tx.read_set.items())
        if not ok:
            flags.append(TxFlag.MVCC_CONFLICT)
            continue
        flags.append(TxFlag.VALID)
        version = Version(block.block_num, tx_num)
        for ck, value in tx.write_set.items():
            if value is None:
                effective[ck] = None
                batch.delete(ck)
            else:
                effective[ck] = version
                batch.put(ck, value, version)
    return ValidationResult(block.block_num, flags, batch)


def commit_block(
    store: VersionedStore, validation: ValidationResult, block_num: int, *, sync: Optional[bool] = None
) -> None:
    if validation.block_num != block_num:
        raise StaleHeight(f"validation was for block {validation.block_num}, not {block_num}")
    height = Version(block_num, max(0, len(validation.flags) - 1))
    faults.point("txflow.before_commit")
    store.commit(validation.batch, height, sync=sync)
    faults.point("txflow.after_commit")


def process_block(
    store: VersionedStore, programs: Iterable[Program], block_num: int, *, sync: Optional[bool] = None
) -> ValidationResult:
    """Simulate all programs on one pre-block snapshot, then validate and commit."""
    _check_height(store, block_num)
    view = store.snapshot()
    results = [simulate(view, p) for p in programs]
    del view
    block = Block(block_num, results)
    validation = validate_block(store, block)
    faults.point("txflow.validated")
    commit_block(store, validation, block_num, sync=sync)
    if validation.invalid_count:
        log.debug("block %d: %d/%d transactions invalid", block_num, validation.invalid_count, len(results))
    return validation
