from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Optional, TypeVar

T = TypeVar("T")
R = TypeVar("R")

ENV_VAR = "PHYLOKERN_THREADS"


def resolve_threads(threads: Optional[int] = None) -> int:
    """Explicit value, then ``$PHYLOKERN_THREADS``, then 1."""
    if threads is None:
        env = os.environ.get(ENV_VAR, "").strip()
        threads = int(env) if env else 1
    if threads < 1:
        raise ValueError("thread count must be >= 1")
    return threads


def ordered_map(fn: Callable[[T], R], items: Iterable[T], threads: Optional[int] = None) -> list[R]:
    """``map`` over a thread pool; results keep input order."""
    items = list(items)
    n = resolve_threads(threads)
    if n == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
