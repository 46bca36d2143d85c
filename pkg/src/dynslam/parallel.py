"""Deterministic chunked execution.

Work is always split into the same fixed-size chunks and results are merged
in chunk order, so outputs are bitwise identical whether chunks run on one
thread or many — the thread count only changes wall-clock time.
"""

from concurrent.futures import ThreadPoolExecutor

CHUNK_RAYS = 128  # rays per work unit in the rendering pipeline


def chunk_slices(n: int, chunk: int):
    """[(start, stop), ...] covering range(n) in fixed strides."""
    return [(i, min(i + chunk, n)) for i in range(0, n, chunk)]


def ordered_map(fn, items, threads: int = 1) -> list:
    """Apply fn to items, preserving item order in the result list."""
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
