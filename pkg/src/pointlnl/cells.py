"""Local-nonlocal feature cells.

The local cell (PL) turns each neighbor's relative position into a small
convolution matrix via a learned map g: R^3 -> R^{D_l x D_mid}, multiplies
the neighbor feature through it, and reduces over the neighborhood. The
nonlocal cell (PNL) lets every sampled (query) point attend over the
layer's entire key point set. Their outputs fuse by channel-wise sum
followed by a nonlinear projection.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import GroupedNeighborhood
from .nn import MLP, BatchNormState, LinearMap, ParamStore
from .sampling import attention_width


class PLParams:
    """Point local cell parameters: the position-to-weight map g and the
    post projection with batch norm."""

    G_HIDDEN = 16

    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator, d_mid: int | None = None,
                 aggregate: str = "sum"):
        if aggregate not in ("sum", "max"):
            raise ValueError(f"unknown aggregation '{aggregate}'")
        self.d_in = d_in
        self.d_mid = d_mid if d_mid is not None else max(1, d_out // 2)
        self.d_out = d_out
        self.aggregate = aggregate
        self.g = MLP(store, f"{name}.g", [3, self.G_HIDDEN, d_in * self.d_mid], rng)
        # a center is its own nearest neighbor, so g sees exact zero inputs;
        # nudge the hidden bias off zero so those rows do not sit on the
        # ReLU kink
        self.g.layers[0].bias.data[:] = rng.uniform(0.05, 0.2, size=self.G_HIDDEN)
        self.post = LinearMap(store, f"{name}.post", self.d_mid, d_out, rng, bias=False)
        self.bn = BatchNormState(store, f"{name}.bn", d_out, rng)


class PNLParams:
    """Point nonlocal cell parameters: attention projections plus the
    channel-adjusting output map with batch norm.

    The output channel must not shrink (d_out >= d_in): widths grow with
    downsampling so the encoder does not lose information.
    """

    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator):
        if d_out < d_in:
            raise ValueError(
                f"nonlocal cell output width {d_out} must be >= input width {d_in}")
        d_prime = attention_width(d_in)
        self.d_in = d_in
        self.d_prime = d_prime
        self.d_out = d_out
        self.phi = LinearMap(store, f"{name}.phi", d_in, d_prime, rng, bias=False)
        self.theta = LinearMap(store, f"{name}.theta", d_in, d_prime, rng, bias=False)
        self.gamma = LinearMap(store, f"{name}.gamma", d_in, d_prime, rng, bias=False)
        self.sigma = LinearMap(store, f"{name}.sigma", d_prime, d_out, rng, bias=False)
        self.bn = BatchNormState(store, f"{name}.bn", d_out, rng)


def pl_cell(group: GroupedNeighborhood, p: PLParams, training: bool) -> Tensor:
    """Position-conditioned local aggregation over each neighborhood.

    Every neighbor feature f_n is multiplied by the matrix g(x_n - x_i);
    the products reduce over the K neighbors (sum by default), then pass
    through linear + batch norm + ReLU. Invariant to neighbor order.
    """
    n_s, k = group.indices.shape
    if k == 0:
        raise ValueError("local cell needs a non-empty group")
    if group.group_feats.shape[-1] != p.d_in:
        raise ValueError(
            f"group features have width {group.group_feats.shape[-1]}, expected {p.d_in}")
    weights = p.g(group.rel_coords)                       # [Ns, K, d_in * d_mid]
    weights = ad.reshape(weights, (n_s * k, p.d_in, p.d_mid))
    feats = ad.reshape(group.group_feats, (n_s * k, 1, p.d_in))
    prod = ad.reshape(ad.matmul(feats, weights), (n_s, k, p.d_mid))
    if p.aggregate == "sum":
        agg = ad.tsum(prod, axis=1)
    else:
        agg = ad.tmax(prod, axis=1)
    return ad.relu(p.bn(p.post(agg), training))


def pnl_cell(query_feats: Tensor, key_feats: Tensor, p: PNLParams, training: bool,
             emit_attention: bool = False):
    """Global attention of each query point over the entire key set.

    Softmax normalizes over all N keys, so the output is invariant to any
    permutation of the key rows. Returns the [Ns, d_out] features, plus
    the attention map when `emit_attention` is set.
    """
    if key_feats.shape[0] == 0:
        raise ValueError("nonlocal cell needs a non-empty key set")
    if query_feats.shape[-1] != p.d_in or key_feats.shape[-1] != p.d_in:
        raise ValueError(
            f"query/key widths {query_feats.shape[-1]}/{key_feats.shape[-1]} "
            f"do not match expected {p.d_in}")
    q = p.phi(query_feats)                                # [Ns, D']
    k = p.theta(key_feats)                                # [N, D']
    v = p.gamma(key_feats)                                # [N, D']
    logits = ad.scale(ad.matmul(q, ad.transpose(k, (1, 0))), 1.0 / np.sqrt(p.d_prime))
    attn = ad.softmax(logits, axis=1)
    out = ad.relu(p.bn(p.sigma(ad.matmul(attn, v)), training))
    if emit_attention:
        return out, attn.data
    return out


class FuseParams:
    def __init__(self, store: ParamStore, name: str, d: int, rng: np.random.Generator):
        self.d = d
        self.fuse_map = LinearMap(store, f"{name}.map", d, d, rng, bias=False)
        self.bn = BatchNormState(store, f"{name}.bn", d, rng)


def lnl_fuse(local: Tensor | None, nonlocal_: Tensor | None, p: FuseParams,
             training: bool, mode: str = "both") -> Tensor:
    """Channel-wise sum of the two branches followed by a nonlinear
    projection. `mode` selects single-branch pass-through for ablations."""
    if mode == "local":
        if local is None:
            raise ValueError("local pass-through requires the local branch")
        return local
    if mode == "nonlocal":
        if nonlocal_ is None:
            raise ValueError("nonlocal pass-through requires the nonlocal branch")
        return nonlocal_
    if mode != "both":
        raise ValueError(f"unknown fuse mode '{mode}'")
    if local.shape != nonlocal_.shape:
        raise ValueError(f"branch shapes differ: {local.shape} vs {nonlocal_.shape}")
    return ad.relu(p.bn(p.fuse_map(ad.add(local, nonlocal_)), training))
