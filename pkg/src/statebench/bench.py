"""Workload generation and throughput measurement.

Client threads submit transaction programs into a bounded queue; one
pipeline worker cuts the stream into blocks of ``block_size`` and drives
:func:`statebench.txflow.process_block`. Blocks are cut only on size or at
the end of the stream, and index assignment and enqueueing happen under
one lock, so block contents depend only on the seed and the spec.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import os
import platform
import queue
import shutil
import struct
import threading
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Optional

from statebench.backends import StoreProvider, get_backend
from statebench.errors import BenchmarkAborted, ConfigError, MissingAsset
from statebench.txflow import TxContext, TxFlag, process_block
from statebench.state import VersionedStore

if TYPE_CHECKING:
    from statebench.config import RunConfig

log = logging.getLogger(__name__)

ASSET_NAMESPACE = b"fixedasset"
HOT_KEY = b"hot_counter"
DEFAULT_DURATION = 30.0


class WorkloadKind(enum.Enum):
    CREATE_ASSET = "CREATE_ASSET"
    READ_ASSET = "READ_ASSET"
    NO_OP = "NO_OP"


@dataclass(frozen=True)
class WorkloadSpec:
    kind: WorkloadKind = WorkloadKind.CREATE_ASSET
    value_size: int = 100
    # stop condition: duration (seconds) or tx_count; neither means DEFAULT_DURATION
    duration: Optional[float] = None
    tx_count: Optional[int] = None
    clients: int = 4
    block_size: int = 50
    seed: int = 0
    sync_writes: bool = True
    # fraction of CREATE_ASSET transactions that also bump a shared counter
    conflict_ratio: float = 0.0
    # READ_ASSET reads asset_<index % population>
    population: int = 1000

    def __post_init__(self):
        if isinstance(self.kind, str):
            try:
                object.__setattr__(self, "kind", WorkloadKind(self.kind.upper()))
            except ValueError:
                valid = ", ".join(k.value for k in WorkloadKind)
                raise ConfigError(f"unknown workload kind {self.kind!r}; valid: {valid}", "kind") from None
        if self.duration is None and self.tx_count is None:
            object.__setattr__(self, "duration", DEFAULT_DURATION)
        if self.duration is not None and self.tx_count is not None:
            raise ConfigError("exactly one of duration and tx_count must be set", "duration")
        if self.duration is not None and not self.duration > 0:
            raise ConfigError("must be > 0", "duration")
        if self.tx_count is not None and self.tx_count < 0:
            raise ConfigError("must be >= 0", "tx_count")
        if self.kind is not WorkloadKind.NO_OP and self.value_size < 1:
            raise ConfigError("must be >= 1 for CREATE_ASSET and READ_ASSET", "value_size")
        if self.clients < 1:
            raise ConfigError("must be >= 1", "clients")
        if self.block_size < 1:
            raise ConfigError("must be >= 1", "block_size")
        if not 0.0 <= self.conflict_ratio <= 1.0:
            raise ConfigError("must be within [0, 1]", "conflict_ratio")
        if self.population < 1:
            raise ConfigError("must be >= 1", "population")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("must be an unsigned 64-bit integer", "seed")


# -- transaction programs ------------------------------------------------------


def _digest(seed: int, index: int, tag: bytes, size: int) -> bytes:
    return hashlib.shake_128(struct.pack(">QQ", seed, index) + tag).digest(size)


def asset_key(index: int) -> bytes:
    return b"asset_%d" % index


def asset_value(seed: int, index: int, size: int) -> bytes:
    return _digest(seed, index, b"value", size)


def contends(seed: int, index: int, ratio: float) -> bool:
    if ratio <= 0.0:
        return False
    draw = int.from_bytes(_digest(seed, index, b"contend", 8), "big") / 2**64
    return draw < ratio


@dataclass(frozen=True)
class CreateAsset:
    index: int
    value: bytes = field(repr=False)
    contend: bool = False

    def __call__(self, ctx: TxContext):
        ctx.put(ASSET_NAMESPACE, asset_key(self.index), self.value)
        if self.contend:
            raw = ctx.get(ASSET_NAMESPACE, HOT_KEY)
            count = int(raw) if raw else 0
            ctx.put(ASSET_NAMESPACE, HOT_KEY, b"%d" % (count + 1))


@dataclass(frozen=True)
class ReadAsset:
    index: int

    def __call__(self, ctx: TxContext) -> bytes:
        value = ctx.get(ASSET_NAMESPACE, asset_key(self.index))
        if value is None:
            raise MissingAsset(f"asset_{self.index} is not populated")
        return value


@dataclass(frozen=True)
class NoOp:
    """Fixed CPU-only work; touches no state."""

    def __call__(self, ctx: TxContext) -> bytes:
        return hashlib.sha256(b"statebench-noop").digest()


def gen_create_asset(seed: int, index: int, value_size: int, conflict_ratio: float = 0.0) -> CreateAsset:
    if value_size < 1:
        raise ValueError("value_size must be >= 1")
    return CreateAsset(index, asset_value(seed, index, value_size), contends(seed, index, conflict_ratio))


def gen_read_asset(seed: int, index: int) -> ReadAsset:
    return ReadAsset(index)


def gen_no_op() -> NoOp:
    return NoOp()


def program_factory(spec: WorkloadSpec) -> Callable[[int], Callable]:
    if spec.kind is WorkloadKind.CREATE_ASSET:
        return lambda i: gen_create_asset(spec.seed, i, spec.value_size, spec.conflict_ratio)
    if spec.kind is WorkloadKind.READ_ASSET:
        return lambda i: gen_read_asset(spec.seed, i % spec.population)
    noop = gen_no_op()
    return lambda i: noop


def next_block_num(store: VersionedStore) -> int:
    sp = store.savepoint()
    return 0 if sp is None else sp.block_num + 1


def populate(store: VersionedStore, spec: WorkloadSpec) -> int:
    """Write asset_0 .. asset_<population-1> for a READ_ASSET run. Returns blocks committed."""
    block_num = next_block_num(store)
    blocks = 0
    for lo in range(0, spec.population, spec.block_size):
        hi = min(lo + spec.block_size, spec.population)
        programs = [gen_create_asset(spec.seed, i, spec.value_size) for i in range(lo, hi)]
        process_block(store, programs, block_num, sync=spec.sync_writes)
        block_num += 1
        blocks += 1
    return blocks


# -- reports -------------------------------------------------------------------


def percentile(sorted_values: list[float], q: float) -> float:
    """Linear-interpolated percentile, ``q`` in [0, 100]."""
    if not sorted_values:
        return 0.0
    pos = (len(sorted_values) - 1) * q / 100.0
    lo = int(pos)
    hi = min(lo + 1, len(sorted_values) - 1)
    return sorted_values[lo] + (sorted_values[hi] - sorted_values[lo]) * (pos - lo)


def host_description() -> dict:
    return {
        "platform": platform.platform(),
        "machine": platform.machine(),
        "processor": platform.processor(),
        "cpu_count": os.cpu_count(),
        "python": platform.python_version(),
    }


def environment_record(store: Optional[VersionedStore], descriptor, spec: WorkloadSpec) -> dict:
    return {
        "backend": descriptor.name,
        "family": descriptor.family.value,
        "durable": descriptor.durable,
        "sync_writes": spec.sync_writes,
        "block_size": spec.block_size,
        "clients": spec.clients,
        "backend_options": dict(store.options if store is not None else descriptor.defaults),
        "host": host_description(),
    }


@dataclass
class BenchmarkReport:
    backend: str
    workload: WorkloadSpec
    tps: float = 0.0
    latency_p50: float = 0.0
    latency_p95: float = 0.0
    latency_p99: float = 0.0
    submitted: int = 0
    committed: int = 0
    invalid: int = 0
    aborted: int = 0
    bytes_written: int = 0
    elapsed_s: float = 0.0
    blocks: int = 0
    environment: dict = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["workload"]["kind"] = self.workload.kind.value
        return d


class _Meter:
    """Counters owned by the pipeline worker."""

    def __init__(self):
        self.committed = 0
        self.invalid = 0
        self.blocks = 0
        self.latencies: list[float] = []


def _finish(report: BenchmarkReport, meter: _Meter, submitted: int, elapsed: float, bytes_written: int) -> None:
    lat = sorted(meter.latencies)
    report.submitted = submitted
    report.committed = meter.committed
    report.invalid = meter.invalid
    report.aborted = submitted - meter.committed - meter.invalid
    report.blocks = meter.blocks
    report.elapsed_s = elapsed
    report.tps = meter.committed / elapsed if elapsed > 0 else 0.0
    report.latency_p50 = percentile(lat, 50)
    report.latency_p95 = percentile(lat, 95)
    report.latency_p99 = percentile(lat, 99)
    report.bytes_written = bytes_written


def run_workload(store: VersionedStore, spec: WorkloadSpec) -> BenchmarkReport:
    """Drive ``spec`` against ``store`` until its stop condition, then drain."""
    descriptor = store.descriptor
    report = BenchmarkReport(
        backend=descriptor.name if descriptor else "?",
        workload=spec,
        environment=environment_record(store, descriptor, spec) if descriptor else {},
    )
    make = program_factory(spec)
    q: "queue.Queue" = queue.Queue(maxsize=4 * spec.block_size)
    lock = threading.Lock()
    counters = {"next": 0, "submitted": 0}
    stop = threading.Event()
    bytes_before = store.bytes_written

    start = time.perf_counter()
    deadline = start + spec.duration if spec.duration is not None else None

    def client() -> None:
        while not stop.is_set():
            with lock:
                if spec.tx_count is not None and counters["next"] >= spec.tx_count:
                    return
                if deadline is not None and time.perf_counter() >= deadline:
                    return
                index = counters["next"]
                item = (time.perf_counter(), make(index))
                while True:
                    try:
                        q.put(item, timeout=0.05)
                        break
                    except queue.Full:
                        if stop.is_set():
                            return
                counters["next"] = index + 1
                counters["submitted"] += 1

    threads = [threading.Thread(target=client, name=f"client-{i}", daemon=True) for i in range(spec.clients)]
    for t in threads:
        t.start()

    meter = _Meter()
    block_num = next_block_num(store)
    pending: list = []

    def cut_block() -> None:
        nonlocal block_num
        validation = process_block(store, [p for _, p in pending], block_num, sync=spec.sync_writes)
        done = time.perf_counter()
        for (submitted_at, _), flag in zip(pending, validation.flags):
            if flag is TxFlag.VALID:
                meter.committed += 1
                meter.latencies.append((done - submitted_at) * 1000.0)
            else:
                meter.invalid += 1
        meter.blocks += 1
        block_num += 1
        pending.clear()

    try:
        while True:
            try:
                pending.append(q.get(timeout=0.01))
            except queue.Empty:
                if q.empty() and not any(t.is_alive() for t in threads):
                    if pending:
                        cut_block()
                    break
                continue
            if len(pending) >= spec.block_size:
                cut_block()
    except Exception as exc:
        stop.set()
        for t in threads:
            t.join()
        _finish(report, meter, counters["submitted"], time.perf_counter() - start, store.bytes_written - bytes_before)
        report.error = f"{type(exc).__name__}: {exc}"
        raise BenchmarkAborted(report.error, report) from exc

    for t in threads:
        t.join()
    _finish(report, meter, counters["submitted"], time.perf_counter() - start, store.bytes_written - bytes_before)
    return report


# -- sweeps ----------------------------------------------------------------------


def cell_dir(data_root, backend: str, spec: WorkloadSpec) -> Path:
    return Path(data_root) / f"{backend}-{spec.kind.value.lower()}-{spec.value_size}"


def sweep_cells(config: "RunConfig") -> list[tuple[str, WorkloadSpec]]:
    cells = []
    for backend in config.backend_names():
        for template in config.workloads:
            if template.kind is WorkloadKind.NO_OP:
                cells.append((backend, replace(template, value_size=0)))
                continue
            for size in config.value_sizes:
                cells.append((backend, replace(template, value_size=size)))
    return cells


def run_cell(config: "RunConfig", backend: str, spec: WorkloadSpec) -> BenchmarkReport:
    descriptor = get_backend(backend)
    root = cell_dir(config.data_root, backend, spec)
    if root.exists():
        shutil.rmtree(root)
    try:
        provider = StoreProvider(descriptor, root if descriptor.durable else None, **config.backend_options.get(backend, {}))
        store = provider.open(config.ledger, sync=spec.sync_writes)
        try:
            if spec.kind is WorkloadKind.READ_ASSET:
                populate(store, spec)
            return run_workload(store, spec)
        finally:
            store.close()
    except BenchmarkAborted as exc:
        return exc.report
    except Exception as exc:
        log.exception("cell %s %s %d failed", backend, spec.kind.value, spec.value_size)
        return BenchmarkReport(
            backend=backend,
            workload=spec,
            environment=environment_record(None, descriptor, spec),
            error=f"{type(exc).__name__}: {exc}",
        )
    finally:
        if not config.keep_stores and root.exists():
            shutil.rmtree(root, ignore_errors=True)


def run_sweep(config: "RunConfig", on_report: Optional[Callable[[BenchmarkReport], None]] = None) -> list[BenchmarkReport]:
    """Run every (backend, workload, value size) cell on a fresh store, in order."""
    reports = []
    for backend, spec in sweep_cells(config):
        log.info("running %s %s value_size=%d", backend, spec.kind.value, spec.value_size)
        report = run_cell(config, backend, spec)
        reports.append(report)
        if on_report is not None:
            on_report(report)
    return reports
