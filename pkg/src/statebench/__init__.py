"""Versioned world-state storage with pluggable backends and a write benchmark."""

from statebench.errors import (
    AlreadyOpen,
    BackendFailure,
    BenchmarkAborted,
    ConfigError,
    HeightError,
    InvalidNamespace,
    MalformedValue,
    MissingAsset,
    ProgramError,
    StaleHeight,
    StateError,
    StoreClosed,
)
from statebench.state import (
    CompositeKey,
    SnapshotView,
    UpdateBatch,
    Version,
    VersionedStore,
    VersionedValue,
)

__version__ = "0.1.0"
