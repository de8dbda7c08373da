# src/utils/parallel.py
"""Bounded fan-out of blocking numerical work.

Usage:
    results = run_bounded([partial(solve_lp, p, cfg) for p in programs], max_workers=4)

Results come back in submission order whatever the completion order, so every
reduction over them is deterministic.
"""
import asyncio
from typing import Callable, List, Optional, Sequence, TypeVar

from src.config.settings import settings

T = TypeVar("T")


async def gather_bounded(
    tasks: Sequence[Callable[[], T]],
    max_workers: Optional[int] = None,
) -> List[T]:
    """Run blocking callables in worker threads, at most max_workers at a time."""
    limit = max_workers or settings.max_workers
    semaphore = asyncio.Semaphore(limit)

    async def run_one(task: Callable[[], T]) -> T:
        async with semaphore:
            return await asyncio.to_thread(task)

    return await asyncio.gather(*(run_one(task) for task in tasks))


def run_bounded(
    tasks: Sequence[Callable[[], T]],
    max_workers: Optional[int] = None,
) -> List[T]:
    """Synchronous front end to gather_bounded."""
    if not tasks:
        return []
    limit = max_workers or settings.max_workers
    if limit == 1 or len(tasks) == 1:
        return [task() for task in tasks]
    try:
        asyncio.get_running_loop()
    except RuntimeError:
        return asyncio.run(gather_bounded(tasks, limit))
    # Already inside an event loop: fall back to sequential execution
    return [task() for task in tasks]
