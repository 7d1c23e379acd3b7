"""Worker-count policy for the few ops that can fan out over a batch.

The environment variable FMFA_THREADS caps parallelism: unset or "1"
means serial, "0" means auto (one worker per CPU, capped), and any other
positive integer is used as given. Parallel consumers must assemble
results by index and merge counters by summation so the outcome is
bit-identical to the serial path.
"""
from __future__ import annotations

import os

__all__ = ["max_workers", "THREADS_ENV_VAR"]

THREADS_ENV_VAR = "FMFA_THREADS"
_AUTO_CAP = 8


def max_workers() -> int:
    raw = os.environ.get(THREADS_ENV_VAR)
    if raw is None or raw.strip() == "":
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV_VAR} must be an integer, got {raw!r}") from None
    if value < 0:
        raise ValueError(f"{THREADS_ENV_VAR} must be non-negative, got {value}")
    if value == 0:
        return min(os.cpu_count() or 1, _AUTO_CAP)
    return value
