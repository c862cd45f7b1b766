import logging
import time
from concurrent.futures import Executor
from typing import Callable, Optional, TypeVar

import numpy as np
import psutil

logger = logging.getLogger('cohesion_groups.util')

# Rows per evaluation chunk. Chunk boundaries must not depend on the worker
# count, otherwise BLAS results (and therefore signs) can differ between runs.
EVAL_CHUNK = 256

T = TypeVar('T')


def default_threads() -> int:
    '''Number of physical cores, or 1 if psutil cannot tell'''
    try:
        cores = psutil.cpu_count(logical=False)
    except (NotImplementedError, RuntimeError):
        cores = None
    return cores if cores else 1


def map_chunks(func: Callable[[int, int], np.ndarray], total: int, chunk: int = EVAL_CHUNK,
               executor: Optional[Executor] = None) -> np.ndarray:
    '''Applies func(start, end) over fixed-size row ranges and concatenates in order'''
    if chunk < 1:
        raise ValueError('chunk must be positive')
    bounds = [(start, min(start + chunk, total)) for start in range(0, total, chunk)]
    logger.debug('%s rows in %s chunks', total, len(bounds))
    if not bounds:
        return func(0, 0)
    if executor is None or len(bounds) == 1:
        parts = [func(start, end) for start, end in bounds]
    else:
        parts = list(executor.map(lambda b: func(*b), bounds))
    return np.concatenate(parts, axis=0)


def monotonic() -> float:
    return time.clock_gettime(time.CLOCK_MONOTONIC)
