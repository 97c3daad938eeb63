"""Order-preserving parallel map and the seed-splitting scheme.

Every random stream is ``default_rng(SeedSequence([root, stage, index]))``.
Stage codes are fixed below so a stage's draws do not depend on which other
stages ran, and a market's draws do not depend on the worker that computed it.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

import numpy as np

T = TypeVar("T")
R = TypeVar("R")

STAGES = {
    "generate": 1,
    "consumer-draws": 2,
    "estimate-demand": 3,
    "recover-costs": 4,
    "fit-bids": 5,
    "calibrate-rho": 6,
    "simulate": 7,
}


def default_threads() -> int:
    return os.cpu_count() or 1


def rng_for(root: int, stage: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(root), STAGES[stage], int(index)]))


def pmap(fn: Callable[[T], R], items: Iterable[T], threads: int | None = 1) -> list[R]:
    """``list(map(fn, items))`` spread over threads; output order follows input order."""
    items = list(items)
    threads = threads or default_threads()
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))
