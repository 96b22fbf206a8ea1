"""Kill-point injection for crash-recovery testing.

Storage code calls :func:`point` at each stage boundary and writes through
:func:`write_at`. Tests arm a named point; when it is reached the process
dies immediately with ``os._exit`` (no cleanup, no buffered flushes), which
is what a ``kill -9`` looks like to the files on disk.

A point armed with ``torn=True`` fires inside :func:`write_at` instead, after
half of the buffer has reached the file.
"""

from __future__ import annotations

import os

CRASH_EXIT_CODE = 86

_armed: dict[str, list] = {}


def arm(name: str, hit: int = 1, torn: bool = False) -> None:
    """Crash on the ``hit``-th time ``name`` is reached."""
    _armed[name] = [hit, torn]


def disarm() -> None:
    _armed.clear()


def _fire(name: str, torn: bool) -> bool:
    slot = _armed.get(name)
    if slot is None or slot[1] != torn:
        return False
    slot[0] -= 1
    return slot[0] <= 0


def point(name: str) -> None:
    if _armed and _fire(name, False):
        os._exit(CRASH_EXIT_CODE)


def write_at(fd: int, data: bytes, offset: int, name: str) -> None:
    """``pwrite`` all of ``data``; may tear the write if ``name`` is armed torn."""
    view = memoryview(data)
    if _armed and _fire(name, True):
        half = view[: max(1, len(view) // 2)]
        os.pwrite(fd, half, offset)
        os._exit(CRASH_EXIT_CODE)
    while view:
        n = os.pwrite(fd, view, offset)
        view = view[n:]
        offset += n
