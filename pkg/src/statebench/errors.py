"""Exception hierarchy shared by every layer of the package."""

from __future__ import annotations


class StateError(Exception):
    """Base class for all statebench errors."""


class MalformedValue(StateError):
    """A stored value is shorter than the 16-byte version header."""


class InvalidNamespace(StateError, ValueError):
    """A namespace contains the reserved 0x00 separator."""


class StoreClosed(StateError):
    pass


class BackendFailure(StateError):
    """An I/O error or on-disk corruption inside a raw backend."""


class StaleHeight(StateError):
    """A commit height is not strictly above the current savepoint."""


class HeightError(StateError):
    """A block number is not above the savepoint's block number."""


class AlreadyOpen(StateError):
    pass


class ProgramError(StateError):
    """A transaction program raised during simulation."""


class MissingAsset(ProgramError):
    """A read-asset program found its key absent (bad pre-population)."""


class ConfigError(StateError, ValueError):
    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = (", ".join(where) + ": ") if where else ""
        super().__init__(prefix + message)
        self.message = message


class BenchmarkAborted(StateError):
    """A pipeline error stopped a run; ``report`` holds the partial numbers."""

    def __init__(self, message: str, report):
        super().__init__(message)
        self.report = report
