"""Control over BLAS threading.

``SONN_THREADS=0`` (or 1) pins every BLAS call to a single thread, which is
the reproducibility reference. Unset leaves the library default alone.
"""

from __future__ import annotations

import contextlib
import os

from threadpoolctl import threadpool_limits

ENV_VAR = "SONN_THREADS"


def thread_limit_from_env() -> int | None:
    raw = os.environ.get(ENV_VAR)
    if raw is None or raw.strip() == "":
        return None
    n = int(raw)
    if n < 0:
        raise ValueError(f"{ENV_VAR} must be >= 0, got {n}")
    return max(n, 1)


@contextlib.contextmanager
def thread_limit(n: int | None = None):
    """Cap BLAS threads inside the block. ``None`` reads ``SONN_THREADS``."""
    if n is None:
        n = thread_limit_from_env()
    if n is None:
        yield
        return
    with threadpool_limits(limits=max(n, 1)):
        yield


def sequential():
    """Strictly single-threaded execution."""
    return thread_limit(1)
