"""Chunked process-pool map over cell arrays.

Work is split into contiguous chunks of rows; results are reassembled in
chunk order, so output never depends on scheduling. Shared read-only state
(model, problem) is installed once per worker through the pool initializer;
with the ``fork`` start method it is inherited rather than pickled.
"""

from __future__ import annotations

import math
import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

_STATE = None


def _install(state):
    global _STATE
    _STATE = state


def _run(fn, arrays):
    return fn(_STATE, *arrays)


def resolve_workers(workers: int | None) -> int:
    if workers is None:
        env = os.environ.get("GP3_WORKERS")
        workers = int(env) if env else 1
    if workers < 1:
        raise ValueError("worker count must be positive")
    return workers


SERIAL_CHUNK = 1 << 15


def chunk_size(n: int, workers: int) -> int:
    return max(64, math.ceil(n / (16 * workers)))


class WorkerPool:
    """A pool bound to one piece of shared state; use one per analysis run."""

    def __init__(self, state, workers: int | None = None):
        self.state = state
        self.workers = resolve_workers(workers)
        self._pool = None
        if self.workers > 1:
            methods = mp.get_all_start_methods()
            ctx = mp.get_context("fork" if "fork" in methods else None)
            self._pool = ProcessPoolExecutor(self.workers, mp_context=ctx,
                                             initializer=_install, initargs=(state,))

    def map(self, fn, *arrays, check=None) -> list:
        """Apply ``fn(state, *row_chunks)`` to row chunks; returns per-chunk results in order.

        ``check`` is called between chunks; an exception it raises cancels
        the outstanding work and propagates.
        """
        n = len(arrays[0])
        if n == 0:
            return []
        if self._pool is None:
            if check is None or n <= SERIAL_CHUNK:
                return [fn(self.state, *arrays)]
            out = []
            for s in range(0, n, SERIAL_CHUNK):
                check()
                out.append(fn(self.state, *[a[s:s + SERIAL_CHUNK] for a in arrays]))
            return out
        size = chunk_size(n, self.workers)
        bounds = [(s, min(s + size, n)) for s in range(0, n, size)]
        futures = [self._pool.submit(_run, fn, [a[s:e] for a in arrays]) for s, e in bounds]
        try:
            out = []
            for f in futures:
                if check is not None:
                    check()
                out.append(f.result())
            return out
        except BaseException:
            for f in futures:
                f.cancel()
            raise

    def map_concat(self, fn, *arrays, check=None):
        """Like :meth:`map` for functions returning a tuple of row arrays."""
        parts = self.map(fn, *arrays, check=check)
        if not parts:
            return None
        return tuple(np.concatenate(cols) for cols in zip(*parts))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
