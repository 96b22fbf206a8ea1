"""YAML run configuration: backend selection, workloads and output paths.

Example::

    state_database: lsm
    backends: [memory, lsm, btree]     # optional, overrides state_database
    data_root: ./statebench-data       # default: $STATEBENCH_DATA_ROOT
    output_dir: ./results
    value_sizes: [100, 1000, 64000]
    workloads:
      - kind: CREATE_ASSET
        duration: 30                   # or tx_count: 1000
        clients: 4
        block_size: 50
        seed: 1
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import yaml

from statebench.backends import get_backend
from statebench.bench import WorkloadKind, WorkloadSpec
from statebench.errors import ConfigError

DATA_ROOT_ENV = "STATEBENCH_DATA_ROOT"
DEFAULT_DATA_ROOT = "statebench-data"

_TOP_KEYS = {
    "state_database", "data_root", "workloads", "value_sizes", "backends",
    "output_dir", "ledger", "keep_stores", "backend_options",
}
_WORKLOAD_KEYS = {f.name for f in fields(WorkloadSpec)} - {"value_size"}


@dataclass
class RunConfig:
    state_database: str
    workloads: list[WorkloadSpec]
    value_sizes: list[int] = field(default_factory=list)
    backends: Optional[list[str]] = None
    data_root: Path = Path(DEFAULT_DATA_ROOT)
    output_dir: Path = Path("results")
    ledger: str = "mychannel"
    keep_stores: bool = False
    backend_options: dict[str, dict] = field(default_factory=dict)

    def backend_names(self) -> list[str]:
        return list(self.backends) if self.backends else [self.state_database]

    def with_overrides(self, duration: Optional[float] = None, seed: Optional[int] = None) -> "RunConfig":
        workloads = self.workloads
        if duration is not None:
            workloads = [replace(w, duration=duration, tx_count=None) for w in workloads]
        if seed is not None:
            workloads = [replace(w, seed=seed) for w in workloads]
        return replace(self, workloads=workloads)


def _line_map(text: str) -> dict[str, int]:
    """Map dotted field paths (``workloads[0].clients``) to 1-based lines."""
    lines: dict[str, int] = {}

    def walk(node, path: str) -> None:
        lines.setdefault(path, node.start_mark.line + 1)
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                sub = f"{path}.{k.value}" if path else str(k.value)
                lines[sub] = k.start_mark.line + 1
                walk(v, sub)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                walk(v, f"{path}[{i}]")

    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines
    if root is not None:
        walk(root, "")
    return lines


def parse_config(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}", line=mark.line + 1 if mark else None) from None
    lines = _line_map(text)

    def fail(msg: str, path: str):
        raise ConfigError(msg, path, lines.get(path))

    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping", line=1)
    for key in data:
        if key not in _TOP_KEYS:
            fail(f"unknown key; expected one of {sorted(_TOP_KEYS)}", str(key))

    def check_backend(name, path):
        if not isinstance(name, str):
            fail("must be a backend name", path)
        try:
            get_backend(name)
        except ConfigError as exc:
            fail(exc.message, path)
        return name

    if "state_database" not in data:
        fail("required", "state_database")
    state_database = check_backend(data["state_database"], "state_database")

    backends = data.get("backends")
    if backends is not None:
        if not isinstance(backends, list) or not backends:
            fail("must be a non-empty list of backend names", "backends")
        backends = [check_backend(b, f"backends[{i}]") for i, b in enumerate(backends)]

    raw_workloads = data.get("workloads")
    if not isinstance(raw_workloads, list) or not raw_workloads:
        fail("must be a non-empty list of workloads", "workloads")
    workloads = []
    for i, w in enumerate(raw_workloads):
        path = f"workloads[{i}]"
        if not isinstance(w, dict):
            fail("must be a mapping", path)
        for key in w:
            if key not in _WORKLOAD_KEYS:
                fail(f"unknown workload key; expected one of {sorted(_WORKLOAD_KEYS)}", f"{path}.{key}")
        try:
            workloads.append(WorkloadSpec(value_size=1, **w))
        except ConfigError as exc:
            fail(exc.message, f"{path}.{exc.field}" if exc.field else path)
        except TypeError as exc:
            fail(str(exc), path)

    value_sizes = data.get("value_sizes") or []
    if not isinstance(value_sizes, list):
        fail("must be a list of byte sizes", "value_sizes")
    for i, size in enumerate(value_sizes):
        if not isinstance(size, int) or isinstance(size, bool) or size < 1:
            fail("must be an integer >= 1", f"value_sizes[{i}]")
    if not value_sizes and any(w.kind is not WorkloadKind.NO_OP for w in workloads):
        fail("must be non-empty for CREATE_ASSET and READ_ASSET workloads", "value_sizes")

    backend_options = data.get("backend_options") or {}
    if not isinstance(backend_options, dict):
        fail("must map backend names to option mappings", "backend_options")
    for name, opts in backend_options.items():
        path = f"backend_options.{name}"
        desc = get_backend(check_backend(name, path))
        if not isinstance(opts, dict):
            fail("must be a mapping", path)
        for key in opts:
            if key not in desc.defaults:
                fail(f"unknown option for {name}; expected one of {sorted(desc.defaults)}", f"{path}.{key}")

    data_root = data.get("data_root") or os.environ.get(DATA_ROOT_ENV) or DEFAULT_DATA_ROOT
    return RunConfig(
        state_database=state_database,
        workloads=workloads,
        value_sizes=list(value_sizes),
        backends=backends,
        data_root=Path(data_root),
        output_dir=Path(data.get("output_dir") or "results"),
        ledger=str(data.get("ledger") or "mychannel"),
        keep_stores=bool(data.get("keep_stores", False)),
        backend_options={k: dict(v) for k, v in backend_options.items()},
    )


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)
