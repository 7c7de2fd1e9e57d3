from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np


def map_chunks(func, points: np.ndarray, workers: int = 1, min_chunk: int = 2048):
    """Apply ``func`` to contiguous chunks of a 1-D array and concatenate.

    ``func`` must be element-wise (each output depends only on its own input
    element) so that the result is independent of ``workers``.
    Returns a tuple of arrays when ``func`` does.
    """
    points = np.asarray(points).ravel()
    n = points.size
    if workers <= 1 or n <= min_chunk:
        return func(points)
    n_chunks = min(workers * 4, max(1, n // min_chunk))
    bounds = np.linspace(0, n, n_chunks + 1).astype(int)
    pieces = [points[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(func, pieces))
    if isinstance(results[0], tuple):
        return tuple(np.concatenate(parts) for parts in zip(*results))
    return np.concatenate(results)
