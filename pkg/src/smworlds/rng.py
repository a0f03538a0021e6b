"""Seed handling.  Every stochastic routine takes an explicit integer seed;
ensembles derive one independent stream per member so results do not
depend on how members are scheduled across threads."""
from __future__ import annotations

import os

import numpy as np


def generator(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed)))


def derive_seed(seed: int, index: int) -> int:
    """``mix(seed, index)``: a 64-bit child seed for ensemble member ``index``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def thread_count(override: int | None = None) -> int:
    """Worker count from ``override`` or ``SM_THREADS`` (default 1)."""
    if override is not None:
        n = int(override)
    else:
        raw = os.environ.get("SM_THREADS", "1")
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(f"SM_THREADS must be an integer >= 1, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    return n


def ensemble_map(fn, items, threads: int | None = None) -> list:
    """Map ``fn`` over ``items`` keeping input order.

    Output does not depend on the worker count because each item carries its
    own derived seed.
    """
    items = list(items)
    n = thread_count(threads)
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
