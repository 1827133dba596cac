"""Order-preserving parallel map capped by ``LORA_LAB_THREADS``."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

from .errors import ConfigError

ENV_VAR = "LORA_LAB_THREADS"


def thread_count(threads: int | None = None) -> int:
    """Resolve a worker count; ``0`` or unset means one per CPU."""
    if threads is None:
        raw = os.environ.get(ENV_VAR, "0")
        try:
            threads = int(raw)
        except ValueError:
            raise ConfigError(f"{ENV_VAR} must be an integer, got {raw!r}") from None
    if threads < 0:
        raise ConfigError(f"thread count must be >= 0, got {threads}")
    return threads or (os.cpu_count() or 1)


def parallel_map(fn, items, threads: int | None = None) -> list:
    """``[fn(x) for x in items]``, evaluated on up to ``threads`` workers.

    Results always come back in input order, so callers that reduce them
    sequentially stay deterministic.
    """
    items = list(items)
    workers = min(thread_count(threads), max(len(items), 1))
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
