"""Adaptive sampling: group self-attention over each sampled point's
neighborhood followed by learned softmax re-weighting that shifts both the
coordinate and the feature of the sampled point.

The shifted coordinate is a convex combination of the K neighbor
coordinates, so every adapted point stays inside its neighborhood's
convex hull; this is what pulls samples that landed on outliers back
toward the shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import GroupedNeighborhood, farthest_point_sample, group_gather, knn_query
from .nn import MLP, LinearMap, ParamStore


def attention_width(d_in: int, floor: int = 32) -> int:
    """Intermediate attention channel: the input width, floored at 32."""
    return max(d_in, floor)


class ASParams:
    """Learned pieces of the adaptive sampling module for one layer.

    phi/theta/gamma project group features for dot-product attention;
    sigma_p and sigma_f are two-layer per-point perceptrons producing one
    shift logit per group member; `project` maps the shifted feature back
    to the layer input width so downstream cells see a consistent channel
    count.
    """

    def __init__(self, store: ParamStore, name: str, d_in: int,
                 rng: np.random.Generator):
        d_prime = attention_width(d_in)
        self.d_in = d_in
        self.d_prime = d_prime
        # attention projections are pure linear transformations; the shift
        # heads are bias-free throughout because a bias there only shifts
        # all K logits of a group uniformly, a softmax null direction
        self.phi = LinearMap(store, f"{name}.phi", d_in, d_prime, rng, bias=False)
        self.theta = LinearMap(store, f"{name}.theta", d_in, d_prime, rng, bias=False)
        self.gamma = LinearMap(store, f"{name}.gamma", d_in, d_prime, rng, bias=False)
        self.sigma_p = MLP(store, f"{name}.sigma_p", [d_prime, d_prime, 1], rng, bias=False)
        self.sigma_f = MLP(store, f"{name}.sigma_f", [d_prime, d_prime, 1], rng, bias=False)
        self.project = LinearMap(store, f"{name}.project", d_prime, d_in, rng)


@dataclass
class ASOutput:
    """Adjusted sample set plus the weights that produced it."""

    new_coords: Tensor                 # [Ns, 3]
    new_feats: Tensor                  # [Ns, D'] (or [Ns, D_l] in average/off modes)
    query_feats: Tensor                # [Ns, D_l], fed to downstream cells
    indices: np.ndarray                # initial sample indices [Ns]
    attn_weights: np.ndarray | None = None      # [Ns, K, K]
    shift_weights_p: np.ndarray | None = None   # [Ns, K]
    shift_weights_f: np.ndarray | None = None   # [Ns, K]


def group_self_attention(group: GroupedNeighborhood, p: ASParams) -> tuple[Tensor, Tensor]:
    """Update every group member by dot-product attention over its group.

    Returns (updated_feats [Ns, K, D'], attention [Ns, K, K]); attention
    rows are softmax-normalized over the group members.
    """
    if group.k == 0:
        raise ValueError("cannot attend over an empty group")
    f = group.group_feats
    if f.shape[-1] != p.d_in:
        raise ValueError(f"group features have width {f.shape[-1]}, expected {p.d_in}")
    q = p.phi(f)
    k = p.theta(f)
    v = p.gamma(f)
    logits = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(p.d_prime))
    attn = ad.softmax(logits, axis=-1)
    return ad.matmul(attn, v), attn


def adaptive_shift(group: GroupedNeighborhood, updated_feats: Tensor, p: ASParams,
                   attn: Tensor | None = None) -> ASOutput:
    """Shift each sampled point to softmax-weighted combinations of its
    neighbors' absolute coordinates and updated features."""
    n_s, k = group.indices.shape
    logit_p = ad.reshape(p.sigma_p(updated_feats), (n_s, k))
    logit_f = ad.reshape(p.sigma_f(updated_feats), (n_s, k))
    w_p = ad.softmax(logit_p, axis=1)
    w_f = ad.softmax(logit_f, axis=1)
    new_coords = ad.reshape(
        ad.matmul(ad.reshape(w_p, (n_s, 1, k)), group.abs_coords), (n_s, 3))
    new_feats = ad.reshape(
        ad.matmul(ad.reshape(w_f, (n_s, 1, k)), updated_feats), (n_s, p.d_prime))
    return ASOutput(
        new_coords=new_coords,
        new_feats=new_feats,
        query_feats=p.project(new_feats),
        indices=group.indices[:, 0],
        attn_weights=None if attn is None else attn.data,
        shift_weights_p=w_p.data,
        shift_weights_f=w_f.data,
    )


def _initial_indices(coords: np.ndarray, n_out: int, init: str, start: int,
                     rng: np.random.Generator | None) -> np.ndarray:
    if init == "fps":
        return farthest_point_sample(coords, n_out, start)
    if init == "random":
        if rng is None:
            raise ValueError("random initial sampling requires an rng")
        return np.sort(rng.choice(coords.shape[0], size=n_out, replace=False))
    raise ValueError(f"unknown initial sampling '{init}' (expected fps|random)")


def adaptive_sample(coords, feats, n_out: int, as_k: int, p: ASParams | None,
                    init: str = "fps", weighting: str = "group-feature",
                    start: int = 0, rng: np.random.Generator | None = None) -> ASOutput:
    """Full adaptive sampling: initial subset (FPS or random), k-NN
    grouping, group self-attention, and learned coordinate/feature shifts.

    `weighting="average"` replaces the learned shift weights by uniform
    1/K averaging of the raw neighbors; `as_k == 0` disables adjustment
    entirely and returns the initial samples unchanged.
    """
    coords_t = coords if isinstance(coords, Tensor) else Tensor(np.asarray(coords, float))
    feats_t = feats if isinstance(feats, Tensor) else Tensor(np.asarray(feats, float))
    n = coords_t.shape[0]
    if as_k > n:
        raise ValueError(f"as_k must not exceed the cloud size {n}, got {as_k}")
    idx0 = _initial_indices(coords_t.data, n_out, init, start, rng)

    if as_k == 0:
        picked_c = ad.gather_rows(coords_t, idx0)
        picked_f = ad.gather_rows(feats_t, idx0)
        return ASOutput(new_coords=picked_c, new_feats=picked_f,
                        query_feats=picked_f, indices=idx0)

    centers = coords_t.data[idx0]
    nbr = knn_query(centers, coords_t.data, as_k)
    group = group_gather(coords_t, feats_t, ad.gather_rows(coords_t, idx0), nbr)

    if weighting == "average":
        new_coords = ad.tmean(group.abs_coords, axis=1)
        new_feats = ad.tmean(group.group_feats, axis=1)
        uniform = np.full((n_out, as_k), 1.0 / as_k)
        return ASOutput(new_coords=new_coords, new_feats=new_feats,
                        query_feats=new_feats, indices=idx0,
                        shift_weights_p=uniform, shift_weights_f=uniform.copy())
    if weighting != "group-feature":
        raise ValueError(f"unknown weighting '{weighting}' (expected group-feature|average)")
    if p is None:
        raise ValueError("group-feature weighting requires ASParams")
    updated, attn = group_self_attention(group, p)
    out = adaptive_shift(group, updated, p, attn=attn)
    out.indices = idx0
    return out
