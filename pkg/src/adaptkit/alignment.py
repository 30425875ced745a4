"""Nearest-row search with a compiled core and a numpy fallback.

The compiled extension (``adaptkit._nnsearch``) is preferred when it was
built; otherwise a chunked numpy implementation takes over. Setting the
environment variable ``ADAPTKIT_NO_EXT=1`` forces the fallback, which the
benchmark uses to compare the two paths.

Both paths implement the same contract: for every query row, the bank row
with the smallest squared Euclidean distance, ties broken by the lowest
bank index.
"""

import os

import numpy as np

from .errors import ArgumentError

# Queries are matched in chunks so the fallback never materialises the
# full n*m distance matrix at once.
_CHUNK_ROWS = 256


def _nearest_rows_numpy(query: np.ndarray, bank: np.ndarray):
    n = query.shape[0]
    indices = np.empty(n, dtype=np.int64)
    sqdists = np.empty(n, dtype=np.float64)
    bank_sq = np.einsum("ij,ij->i", bank, bank)
    for start in range(0, n, _CHUNK_ROWS):
        chunk = query[start : start + _CHUNK_ROWS]
        # ||q - b||^2 = ||q||^2 - 2 q.b + ||b||^2, argmin-equivalent and O(n*m*d) via BLAS
        d2 = np.einsum("ij,ij->i", chunk, chunk)[:, None] - 2.0 * (chunk @ bank.T) + bank_sq[None, :]
        idx = np.argmin(d2, axis=1)
        indices[start : start + chunk.shape[0]] = idx
        # recompute the winning distances directly so reported values are exact
        diff = chunk - bank[idx]
        sqdists[start : start + chunk.shape[0]] = np.einsum("ij,ij->i", diff, diff)
    return indices, sqdists


if os.environ.get("ADAPTKIT_NO_EXT") == "1":
    _impl = None
else:
    try:
        from . import _nnsearch as _impl
    except ImportError:
        _impl = None

KERNEL_BACKEND = "compiled" if _impl is not None else "numpy"


def nearest_rows(query: np.ndarray, bank: np.ndarray):
    """Index and squared distance of the nearest bank row per query row.

    Args:
        query: [n, d] array-like.
        bank: [m, d] array-like, m >= 1.

    Returns:
        (indices [n] int64, sqdists [n] float64)
    """
    query = np.ascontiguousarray(query, dtype=np.float64)
    bank = np.ascontiguousarray(bank, dtype=np.float64)
    if query.ndim != 2 or bank.ndim != 2:
        raise ArgumentError("query and bank must be 2-D matrices")
    if bank.shape[0] == 0:
        raise ArgumentError("bank must contain at least one row")
    if query.shape[1] != bank.shape[1]:
        raise ArgumentError(
            f"feature widths differ: query d={query.shape[1]}, bank d={bank.shape[1]}"
        )
    if _impl is not None:
        return _impl.nearest_rows(query, bank)
    return _nearest_rows_numpy(query, bank)
