"""Backend registry and the per-ledger store provider.

Each backend is a triple: a raw store class (``memory``, ``lsm``,
``btree`` modules), the shared key helpers in :mod:`statebench.state`,
and a :class:`StoreProvider` that opens one store per ledger directory.
Backends are selected by registry name, the value of the config file's
``state_database`` key.
"""

from __future__ import annotations

import os
import re
import threading
from pathlib import Path
from typing import Optional

from statebench.backends.base import BackendDescriptor, Family, KVBackend, RawBatch
from statebench.backends.btree import DEFAULTS as BTREE_DEFAULTS
from statebench.backends.btree import open_btree
from statebench.backends.lsm import DEFAULTS as LSM_DEFAULTS
from statebench.backends.lsm import open_lsm
from statebench.backends.memory import open_memory
from statebench.errors import AlreadyOpen, BackendFailure, ConfigError
from statebench.state import VersionedStore

__all__ = [
    "BackendDescriptor",
    "Family",
    "KVBackend",
    "RawBatch",
    "StoreProvider",
    "get_backend",
    "register",
    "registry_list",
]

_NAME_RE = re.compile(r"^[a-z0-9][a-z0-9-]*$")
_LEDGER_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")

_registry: dict[str, BackendDescriptor] = {}


def register(descriptor: BackendDescriptor) -> BackendDescriptor:
    if not _NAME_RE.match(descriptor.name):
        raise ValueError(f"backend name {descriptor.name!r} must be lowercase alphanumeric or hyphen")
    if descriptor.name in _registry:
        raise ValueError(f"backend {descriptor.name!r} already registered")
    _registry[descriptor.name] = descriptor
    return descriptor


def registry_list() -> list[BackendDescriptor]:
    return list(_registry.values())


def get_backend(name: str) -> BackendDescriptor:
    try:
        return _registry[name]
    except KeyError:
        valid = ", ".join(sorted(_registry))
        raise ConfigError(f"unknown backend {name!r}; valid names: {valid}") from None


register(BackendDescriptor("memory", Family.IN_MEMORY, False, open_memory, {}, "in-process sorted map"))
register(
    BackendDescriptor(
        "lsm", Family.LSM_TREE, True, open_lsm, dict(LSM_DEFAULTS),
        "write-ahead log, memtable, tiered sorted tables",
    )
)
register(
    BackendDescriptor(
        "btree", Family.B_PLUS_TREE, True, open_btree, dict(BTREE_DEFAULTS),
        "append-only copy-on-write B+tree with dual meta pages",
    )
)

# (realpath) of every durable store open in this process
_open_paths: set[str] = set()
_open_paths_lock = threading.Lock()


class StoreProvider:
    """Opens versioned stores at ``root/<ledger_name>`` for one backend."""

    def __init__(self, descriptor: BackendDescriptor, root_path, **options):
        if isinstance(descriptor, str):
            descriptor = get_backend(descriptor)
        unknown = set(options) - set(descriptor.defaults)
        if unknown:
            raise ConfigError(f"backend {descriptor.name!r} has no option(s) {sorted(unknown)}")
        self.descriptor = descriptor
        self.root_path = Path(root_path) if root_path is not None else None
        self.options = {**descriptor.defaults, **options}
        self.handles: dict[str, VersionedStore] = {}
        self._lock = threading.Lock()

    def ledger_path(self, ledger_name: str) -> Optional[Path]:
        if self.root_path is None:
            return None
        return self.root_path / ledger_name

    def exists(self, ledger_name: str) -> bool:
        path = self.ledger_path(ledger_name)
        return self.descriptor.durable and path is not None and path.is_dir() and any(path.iterdir())

    def open(self, ledger_name: str, *, sync: bool = True) -> VersionedStore:
        if not ledger_name or not _LEDGER_RE.match(ledger_name):
            raise ValueError(f"ledger name {ledger_name!r} is not filesystem-safe")
        with self._lock:
            if ledger_name in self.handles:
                raise AlreadyOpen(f"ledger {ledger_name!r} is already open on this provider")
            path = self.ledger_path(ledger_name)
            key = None
            if self.descriptor.durable:
                if path is None:
                    raise ValueError(f"backend {self.descriptor.name!r} needs a root path")
                key = os.path.realpath(path)
                with _open_paths_lock:
                    if key in _open_paths:
                        raise AlreadyOpen(f"store at {path} is already open in this process")
                    _open_paths.add(key)
            try:
                raw = self.descriptor.factory(path, **self.options)
                store = VersionedStore(
                    raw, self.descriptor, sync=sync, options=self.options, on_close=self._closed_cb(ledger_name, key)
                )
            except OSError as exc:
                self._release(key)
                raise BackendFailure(str(exc)) from exc
            except BaseException:
                self._release(key)
                raise
            self.handles[ledger_name] = store
            return store

    @staticmethod
    def _release(key: Optional[str]) -> None:
        if key is not None:
            with _open_paths_lock:
                _open_paths.discard(key)

    def _closed_cb(self, ledger_name: str, key: Optional[str]):
        def cb(store: VersionedStore) -> None:
            with self._lock:
                if self.handles.get(ledger_name) is store:
                    del self.handles[ledger_name]
            self._release(key)

        return cb

    def close(self) -> None:
        for store in list(self.handles.values()):
            store.close()


def open_store(backend: str, root_path, ledger_name: str, *, sync: bool = True, **options) -> VersionedStore:
    """Open one ledger on a throwaway provider (convenience for scripts)."""
    return StoreProvider(get_backend(backend), root_path, **options).open(ledger_name, sync=sync)
