"""Pure-numpy reference implementations of the hot geometry kernels.

These are the fallback path; `_numba.py` mirrors every function with the
same selection arithmetic so index outputs are identical across backends.
"""

import numpy as np


def pairwise_sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between two coordinate sets.

    Computed by explicit differencing (not the expanded dot-product form)
    so values match a per-pair brute-force evaluation exactly, ties
    included.
    """
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def fps_indices(coords: np.ndarray, n_out: int, start: int) -> np.ndarray:
    """Greedy farthest-point selection of `n_out` indices.

    Each step picks the point maximizing the min squared distance to the
    already-selected set; ties resolve to the lowest index among points
    not yet selected. Selected points are masked with -1 so outputs are
    distinct even for clouds with duplicate coordinates.
    """
    n = coords.shape[0]
    sel = np.empty(n_out, dtype=np.int64)
    sel[0] = start
    diff = coords - coords[start]
    mind = np.einsum("ij,ij->i", diff, diff)
    mind[start] = -1.0
    for t in range(1, n_out):
        nxt = int(np.argmax(mind))
        sel[t] = nxt
        diff = coords - coords[nxt]
        d = np.einsum("ij,ij->i", diff, diff)
        np.minimum(mind, d, out=mind)
        mind[nxt] = -1.0
    return sel


def knn_indices(queries: np.ndarray, keys: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest keys per query, ascending by squared
    distance, ties by lowest key index."""
    d = pairwise_sq_dist(queries, keys)
    return np.argsort(d, axis=1, kind="stable")[:, :k].astype(np.int64)


def scatter_add_rows(out: np.ndarray, idx: np.ndarray, updates: np.ndarray) -> None:
    """Accumulate update rows into `out` at row positions `idx` (in place).

    Duplicate indices accumulate; this is the adjoint of a row gather.
    """
    np.add.at(out, idx, updates)
