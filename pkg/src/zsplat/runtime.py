"""Process-wide worker-pool bound (CLI --threads / ZSPLAT_THREADS)."""

from __future__ import annotations

import os

_threads: int | None = None


def set_threads(n: int | None) -> None:
    global _threads
    _threads = None if n is None else max(1, int(n))


def get_threads() -> int:
    if _threads is not None:
        return _threads
    env = os.environ.get("ZSPLAT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1
