"""
Worker pool behind the ``--jobs`` flag.

Results always come back in input order, so output files do not depend on
the number of workers.
"""

import logging
import multiprocessing
import os
from typing import Callable, Iterable, Iterator, List, Optional, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar('T')
R = TypeVar('R')


def default_jobs() -> int:
    return os.cpu_count() or 1


def chunked(total: int, size: int) -> Iterator[slice]:
    """Consecutive slices of at most ``size`` covering ``range(total)``."""
    size = max(1, int(size))
    for start in range(0, total, size):
        yield slice(start, min(start + size, total))


def map_ordered(fn: Callable[[T], R], items: Iterable[T],
                jobs: Optional[int] = 1) -> List[R]:
    """
    Apply ``fn`` to every item, in worker processes when ``jobs`` > 1.

    Parameters
    ----------
    fn : callable
        Picklable module-level function
    items : iterable
        Task arguments
    jobs : int, optional
        Worker count; None means one per CPU

    Returns
    -------
    list
        ``fn(item)`` for each item, in input order
    """
    items = list(items)
    jobs = default_jobs() if jobs is None else max(1, int(jobs))
    jobs = min(jobs, len(items)) if items else 1
    if jobs == 1:
        return [fn(item) for item in items]
    logger.debug('dispatching %d tasks to %d workers', len(items), jobs)
    with multiprocessing.Pool(jobs) as pool:
        return pool.map(fn, items, chunksize=1)
