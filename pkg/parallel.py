import logging
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, List, TypeVar

import numpy as np

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

# stream tags keep the per-stage random streams of one seed apart
STREAM_REFERENCE = 1
STREAM_BLOCK = 2
STREAM_SWAP = 3
STREAM_DP = 4
STREAM_BASELINE = 5


def derive_rng(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    """Independent generator for (seed, stream, index); scheduling never changes the draws."""
    if seed < 0:
        raise ValueError(f"seeds must be non-negative, got {seed}")
    return np.random.default_rng(np.random.SeedSequence([seed, stream, index]))


def parallel_map(fn: Callable[[T], R], items: Iterable[T], workers: int = 1) -> List[R]:
    """Map `fn` over items, in order; processes are used only when workers > 1."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    chunksize = max(1, len(items) // (workers * 4))
    logger.debug(f"Dispatching {len(items)} tasks to {workers} workers (chunksize {chunksize})")
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=chunksize))
