"""Input validation and deterministic parallel helpers."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .exceptions import DataError, ShapeError
from .store import EmbeddingMatrix

# Fixed block size: results never depend on how many threads process blocks.
BLOCK_ROWS = 1024


def check_matrix(X, *, dim=None, name="X", allow_empty=False) -> np.ndarray:
    """Return ``X`` as a finite 2-D float64 array."""
    arr = np.asarray(X.data if isinstance(X, EmbeddingMatrix) else X, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1) if arr.size else arr.reshape(0, 0)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not allow_empty and arr.shape[0] == 0:
        raise DataError(f"{name} has no rows")
    if dim is not None and arr.shape[1] != dim:
        raise ShapeError(f"{name} has {arr.shape[1]} columns, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains NaN or infinite values")
    return arr


def check_vector(x, *, n=None, name="x", dtype=np.float64) -> np.ndarray:
    arr = np.asarray(x, dtype=dtype).ravel()
    if n is not None and arr.shape[0] != n:
        raise ShapeError(f"{name} has length {arr.shape[0]}, expected {n}")
    if arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains NaN or infinite values")
    return arr


def resolve_threads(threads=None) -> int:
    if threads is None:
        env = os.environ.get("EMBEDLAB_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(threads))


def map_blocks(fn, n_rows, threads=1, block=BLOCK_ROWS):
    """Apply ``fn(start, stop)`` over fixed row blocks, results in block order."""
    bounds = [(s, min(s + block, n_rows)) for s in range(0, n_rows, block)]
    threads = resolve_threads(threads)
    if threads == 1 or len(bounds) <= 1:
        return [fn(s, e) for s, e in bounds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda se: fn(*se), bounds))
