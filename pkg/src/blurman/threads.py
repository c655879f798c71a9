"""Worker-thread cap, read from ``BLURMAN_THREADS``."""
from __future__ import annotations

import os

ENV_VAR = "BLURMAN_THREADS"


def worker_count(default: int | None = None) -> int:
    raw = os.environ.get(ENV_VAR, "").strip()
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(f"{ENV_VAR} must be a positive integer, got {raw!r}") from None
        if n < 1:
            raise ValueError(f"{ENV_VAR} must be a positive integer, got {raw!r}")
        return n
    return default if default is not None else max(1, os.cpu_count() or 1)
