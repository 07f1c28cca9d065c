"""
Worker pool helper honouring the QCR_THREADS environment variable.

QCR_THREADS=0 (the default) keeps everything sequential so runs are
reproducible bit for bit. Results always come back in input order.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, TypeVar

T = TypeVar("T")
R = TypeVar("R")

logger = logging.getLogger(__name__)


def thread_count() -> int:
    """Number of worker threads requested through QCR_THREADS."""
    raw = os.getenv("QCR_THREADS", "0")
    try:
        return max(0, int(raw))
    except ValueError:
        logger.warning(f"Ignoring malformed QCR_THREADS={raw!r}")
        return 0


def ordered_map(func: Callable[[T], R], items: Iterable[T]) -> List[R]:
    """Map ``func`` over ``items``, possibly on threads, preserving order."""
    items = list(items)
    workers = thread_count()
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))
