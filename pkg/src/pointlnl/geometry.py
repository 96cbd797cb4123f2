"""Exact geometric kernels on raw coordinates: farthest point sampling,
k-NN queries, neighborhood gathering, and 3-nearest feature interpolation.

Index-producing ops run brute force (O(Ns * N)) on purpose: at desk scale
exactness against enumeration oracles matters more than speed, and the
hot loops are delegated to `pointlnl.kernels` (numba or numpy backend).
Feature-carrying ops build autodiff graph nodes so gradients reach the
source rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor


@dataclass
class PointCloud:
    """N points with coordinates, optional per-point features and labels.

    `class_id` carries a whole-cloud category for classification tasks;
    `labels` are per-point region ids for segmentation.
    """

    coords: np.ndarray
    feats: np.ndarray | None = None
    labels: np.ndarray | None = None
    class_id: int | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3 or self.coords.shape[0] < 1:
            raise ValueError(f"coords must be [N, 3] with N >= 1, got {self.coords.shape}")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("coords contain non-finite values")
        if self.feats is not None:
            self.feats = np.asarray(self.feats, dtype=np.float64)
            if self.feats.ndim != 2 or self.feats.shape[0] != self.coords.shape[0]:
                raise ValueError("feats row count must match coords")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.coords.shape[0],):
                raise ValueError("labels must have one entry per point")

    @property
    def n(self) -> int:
        return self.coords.shape[0]


@dataclass
class GroupedNeighborhood:
    """Per-center neighbor indices with gathered relative coordinates,
    absolute coordinates, and features (graph tensors)."""

    indices: np.ndarray          # [Ns, K] into the source cloud
    rel_coords: Tensor           # [Ns, K, 3], neighbor minus center
    group_feats: Tensor          # [Ns, K, D]
    abs_coords: Tensor           # [Ns, K, 3]

    @property
    def n_centers(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]


def _coords_of(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.coords
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def pairwise_sq_dist(a, b) -> np.ndarray:
    """All squared Euclidean distances between two coordinate sets [M,3] x [N,3]."""
    return kernels.pairwise_sq_dist(_coords_of(a), _coords_of(b))


def farthest_point_sample(pc, n_out: int, start: int = 0) -> np.ndarray:
    """Greedy max-min subset selection of `n_out` distinct indices.

    The first index is `start`; each following index maximizes the minimum
    distance to the already-selected set, ties broken by lowest index.
    """
    coords = _coords_of(pc)
    n = coords.shape[0]
    if not 1 <= n_out <= n:
        raise ValueError(f"n_out must lie in [1, {n}], got {n_out}")
    if not 0 <= start < n:
        raise ValueError(f"start must lie in [0, {n}), got {start}")
    return kernels.fps_indices(np.ascontiguousarray(coords), n_out, start)


def knn_query(queries, keys, k: int) -> np.ndarray:
    """Indices of the k nearest keys per query row, ascending by squared
    distance, distance ties broken by lowest key index."""
    q = _coords_of(queries)
    kk = _coords_of(keys)
    if k < 1 or k > kk.shape[0]:
        raise ValueError(f"k must lie in [1, {kk.shape[0]}], got {k}")
    return kernels.knn_indices(np.ascontiguousarray(q), np.ascontiguousarray(kk), k)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def group_gather(src_coords, src_feats, centers, idx: np.ndarray) -> GroupedNeighborhood:
    """Gather neighbor coordinates/features for each center.

    `idx` is [Ns, K] into the source rows. Relative coordinates are
    neighbor minus center. Feature gradients scatter-add back to source
    rows, so duplicate indices accumulate.
    """
    coords_t = _as_tensor(src_coords)
    feats_t = _as_tensor(src_feats)
    centers_t = _as_tensor(centers)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 2:
        raise ValueError("idx must be [Ns, K]")
    abs_coords = ad.gather_rows(coords_t, idx)
    n_s = idx.shape[0]
    rel = ad.sub(abs_coords, ad.reshape(centers_t, (n_s, 1, 3)))
    gf = ad.gather_rows(feats_t, idx)
    return GroupedNeighborhood(indices=idx, rel_coords=rel, group_feats=gf,
                               abs_coords=abs_coords)


def three_nn_interpolate(queries, keys, key_feats, eps: float = 1e-8,
                         return_weights: bool = False):
    """Inverse-squared-distance interpolation over each query's 3 nearest keys.

    Weights w_j = (d_j^2 + eps)^-1, normalized to sum to 1. Differentiable
    with respect to `key_feats` and, when queries/keys are graph tensors,
    through the weights with respect to the coordinates as well (the
    nearest-3 selection itself is piecewise constant).
    """
    q_t = _as_tensor(queries)
    k_t = _as_tensor(keys)
    if k_t.shape[0] < 3:
        raise ValueError(f"interpolation needs at least 3 keys, got {k_t.shape[0]}")
    m = q_t.shape[0]
    idx = knn_query(q_t.data, k_t.data, 3)
    nbr = ad.gather_rows(k_t, idx)                              # [M, 3, 3]
    diff = ad.sub(nbr, ad.reshape(q_t, (m, 1, 3)))
    d2 = ad.tsum(ad.mul(diff, diff), axis=2)                    # [M, 3]
    inv = ad.pow_const(ad.add(d2, ad.constant(eps)), -1.0)
    w = ad.mul(inv, ad.pow_const(ad.tsum(inv, axis=1, keepdims=True), -1.0))
    feats_t = _as_tensor(key_feats)
    gathered = ad.gather_rows(feats_t, idx)                     # [M, 3, D]
    out = ad.tsum(ad.mul(gathered, ad.reshape(w, (m, 3, 1))), axis=1)
    if return_weights:
        return out, w.data
    return out


def mean_nn_distance(coords) -> float:
    """Mean distance from each point to its nearest other point."""
    c = _coords_of(coords)
    if c.shape[0] < 2:
        raise ValueError("need at least 2 points")
    idx = knn_query(c, c, 2)[:, 1]
    d = np.sqrt(np.sum((c - c[idx]) ** 2, axis=1))
    return float(d.mean())
