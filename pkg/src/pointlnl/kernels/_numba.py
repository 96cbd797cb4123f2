"""Numba fast path for the hot geometry kernels.

Selection logic (greedy updates, tie-breaking) mirrors `_numpy.py`
operation for operation; the float arithmetic per pair is identical
(dx*dx + dy*dy + dz*dz), so both backends return the same indices.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _sq_dist(a, b, i, j):
    dx = a[i, 0] - b[j, 0]
    dy = a[i, 1] - b[j, 1]
    dz = a[i, 2] - b[j, 2]
    return dx * dx + dy * dy + dz * dz


@njit(cache=True)
def pairwise_sq_dist(a, b):
    m = a.shape[0]
    n = b.shape[0]
    out = np.empty((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            out[i, j] = _sq_dist(a, b, i, j)
    return out


@njit(cache=True)
def fps_indices(coords, n_out, start):
    n = coords.shape[0]
    sel = np.empty(n_out, dtype=np.int64)
    mind = np.empty(n, dtype=np.float64)
    sel[0] = start
    for j in range(n):
        mind[j] = _sq_dist(coords, coords, j, start)
    mind[start] = -1.0
    for t in range(1, n_out):
        best = 0
        best_d = mind[0]
        for j in range(1, n):
            if mind[j] > best_d:
                best_d = mind[j]
                best = j
        sel[t] = best
        for j in range(n):
            d = _sq_dist(coords, coords, j, best)
            if d < mind[j]:
                mind[j] = d
        mind[best] = -1.0
    return sel


@njit(cache=True)
def knn_indices(queries, keys, k):
    nq = queries.shape[0]
    n = keys.shape[0]
    out = np.empty((nq, k), dtype=np.int64)
    dbuf = np.empty(k, dtype=np.float64)
    for i in range(nq):
        count = 0
        for j in range(n):
            d = _sq_dist(queries, keys, i, j)
            if count < k:
                pos = count
                count += 1
            elif d < dbuf[k - 1]:
                pos = k - 1
            else:
                continue
            # insertion keeps (distance, index) order; strict > preserves
            # the earlier (lower) index on equal distances
            while pos > 0 and dbuf[pos - 1] > d:
                dbuf[pos] = dbuf[pos - 1]
                out[i, pos] = out[i, pos - 1]
                pos -= 1
            dbuf[pos] = d
            out[i, pos] = j
    return out


@njit(cache=True)
def scatter_add_rows(out, idx, updates):
    for r in range(idx.shape[0]):
        i = idx[r]
        for c in range(updates.shape[1]):
            out[i, c] += updates[r, c]
