"""Thread control via the STCNET_THREADS environment variable."""

from __future__ import annotations

import contextlib
import os
from typing import Optional

from threadpoolctl import threadpool_limits

from .errors import ConfigError

ENV_VAR = "STCNET_THREADS"


def requested_threads(environ=None) -> Optional[int]:
    """Positive int from STCNET_THREADS, or None when unset."""
    raw = (environ if environ is not None else os.environ).get(ENV_VAR)
    if raw is None or raw.strip() == "":
        return None
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{ENV_VAR} must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"{ENV_VAR} must be a positive integer, got {raw!r}")
    return value


@contextlib.contextmanager
def thread_limit(n: Optional[int] = None):
    """Cap BLAS/OpenMP pools at ``n`` (default: STCNET_THREADS) inside the block."""
    n = requested_threads() if n is None else n
    if n is None:
        yield None
        return
    with threadpool_limits(limits=n):
        yield n
