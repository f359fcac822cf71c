"""Seed derivation and a deterministic process-pool map."""

from __future__ import annotations

import hashlib
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")
R = TypeVar("R")


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from an arbitrary tuple of ints/strings.

    Python's ``hash`` is salted per process, so blake2b over the repr is used
    instead; results are identical across runs, machines and workers.
    """
    # numpy scalars repr differently from python ints under numpy 2
    norm = tuple(int(p) if isinstance(p, (int, np.integer)) else p for p in parts)
    h = hashlib.blake2b(repr(norm).encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "little") >> 1


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


def parallel_map(fn: Callable[[T], R], items: Sequence[T], workers: int = 1) -> list[R]:
    """``[fn(x) for x in items]``, optionally spread over processes.

    Output order always follows ``items``, so downstream aggregation is
    independent of the worker count.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    workers = min(workers, len(items))
    chunk = -(-len(items) // workers)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=chunk))
