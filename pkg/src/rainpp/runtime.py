"""Thread caps and deterministic execution.

BLAS reductions can reorder floating-point sums across threads, so deterministic
mode pins every native thread pool to a single thread.
"""
from __future__ import annotations

import contextlib
import os

from threadpoolctl import threadpool_limits

from .errors import ConfigError

THREADS_ENV = "RAINPP_THREADS"


def thread_cap() -> int | None:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw.strip() == "":
        return None
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return value


@contextlib.contextmanager
def execution(deterministic: bool = True):
    """Limit native thread pools for the duration of the block."""
    limit = 1 if deterministic else thread_cap()
    if limit is None:
        yield
        return
    with threadpool_limits(limits=limit):
        yield
