"""Process-pool map with per-worker shared state and order-preserving gather."""

from __future__ import annotations

import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, List, Optional, Sequence

_WORKER_STATE: dict = {}


def _init_worker(state):
    _WORKER_STATE.clear()
    _WORKER_STATE.update(state)


def _run_task(task):
    fn, arg = task
    return fn(_WORKER_STATE, arg)


def parallel_map(fn: Callable, args: Sequence, workers: int = 1, state: Optional[dict] = None) -> List:
    """``[fn(state, a) for a in args]`` computed by ``workers`` processes; output order follows ``args``.

    ``fn`` must be a module-level function. ``state`` is shipped once per
    worker, so results never depend on how tasks are distributed.
    """
    state = state or {}
    args = list(args)
    if workers <= 1 or len(args) <= 1:
        return [fn(state, a) for a in args]
    ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else None
    workers = min(workers, len(args))
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx, initializer=_init_worker,
                             initargs=(state,)) as ex:
        chunk = max(1, len(args) // (4 * workers))
        return list(ex.map(_run_task, [(fn, a) for a in args], chunksize=chunk))
