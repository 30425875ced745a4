# cython: boundscheck=False, wraparound=False, cdivision=True
"""Exhaustive nearest-row search over a token bank (squared Euclidean).

Hot kernel of few-shot inference: every query patch token is matched
against all k*n bank tokens, so the inner loop runs n*m*d times per
layer. Distances are accumulated term by term in double precision so
results match a plain scalar-loop reference bit for bit; ties resolve
to the lowest bank index via strict less-than.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def nearest_rows(cnp.float64_t[:, ::1] query, cnp.float64_t[:, ::1] bank):
    """For each query row, return (index, squared distance) of the nearest bank row."""
    cdef Py_ssize_t n = query.shape[0]
    cdef Py_ssize_t m = bank.shape[0]
    cdef Py_ssize_t d = query.shape[1]
    if bank.shape[1] != d:
        raise ValueError("query and bank must share the feature dimension")

    indices = np.empty(n, dtype=np.int64)
    sqdists = np.empty(n, dtype=np.float64)
    cdef cnp.int64_t[::1] idx_view = indices
    cdef cnp.float64_t[::1] dist_view = sqdists

    cdef Py_ssize_t i, j, c
    cdef double best, acc, diff
    cdef Py_ssize_t best_j

    with nogil:
        for i in range(n):
            best = -1.0
            best_j = 0
            for j in range(m):
                acc = 0.0
                for c in range(d):
                    diff = query[i, c] - bank[j, c]
                    acc += diff * diff
                if best < 0.0 or acc < best:
                    best = acc
                    best_j = j
            idx_view[i] = best_j
            dist_view[i] = best

    return indices, sqdists
