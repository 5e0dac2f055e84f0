"""Replica fan-out with schedule-independent aggregation."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, TypeVar

from . import streams

T = TypeVar("T")

WORKERS_ENV = "SHAPELAB_WORKERS"


def replica_seed(master: int, i: int, bank: str = "") -> int:
    return streams.substream(master, f"replica/{bank}/{i}")


def resolve_workers(workers: int | None) -> int:
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1") or 1)
    return max(1, workers)


def map_replicas(fn: Callable[..., T], jobs: Iterable[tuple], workers: int | None = None) -> list[T]:
    """Apply ``fn(*job)`` to every job; results come back in job order.

    ``fn`` must be a module-level function when workers > 1.
    """
    jobs = list(jobs)
    workers = resolve_workers(workers)
    if workers == 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *job) for job in jobs]
        return [f.result() for f in futures]
