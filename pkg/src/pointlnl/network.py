"""Model assembly and training: encoder layers built from adaptive
sampling plus local-nonlocal cells, a 3-layer classifier, an
encoder-decoder segmenter, the joint loss with repulsion regularization,
an Adam training loop, metrics, and checkpoint serialization.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cells import FuseParams, PLParams, PNLParams, lnl_fuse, pl_cell, pnl_cell
from .geometry import (PointCloud, farthest_point_sample, group_gather, knn_query,
                       mean_nn_distance, three_nn_interpolate)
from .nn import LinearMap, ParamStore, dropout_mask, maxpool_set
from .sampling import ASParams, adaptive_sample

VARIANTS = ("pl", "pnl", "pl+pnl", "pl+pnl+as")


class DivergenceError(RuntimeError):
    """Raised when training produces a non-finite loss."""


@dataclass(frozen=True)
class LayerConfig:
    """One abstraction layer: sample count, local group size, adaptive
    sampling group size (0 disables adjustment), and the channel list
    whose last entry is the layer output width."""

    npoint: int
    nsample: int
    as_neighbor: int
    mlp: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "mlp", tuple(int(c) for c in self.mlp))
        if self.npoint < 1:
            raise ValueError("npoint must be >= 1")
        if self.npoint > 1 and self.nsample < 1:
            raise ValueError("nsample must be >= 1 for an abstraction layer")
        if self.as_neighbor < 0:
            raise ValueError("as_neighbor must be >= 0")
        if not self.mlp or any(c < 1 for c in self.mlp):
            raise ValueError("mlp must be a non-empty list of positive widths")

    @property
    def d_out(self) -> int:
        return self.mlp[-1]


@dataclass
class LossConfig:
    """Joint objective weights: cross entropy + alpha * repulsion +
    beta * squared weight norm.

    `h` is the repulsion kernel scale; None selects the adaptive scale
    (twice the mean nearest-neighbor distance of each input cloud).
    """

    alpha: float = 0.01
    beta: float = 0.0
    h: float | None = None
    class_weights: np.ndarray | None = None
    k_rep: int = 8

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.h is not None and self.h <= 0:
            raise ValueError("repulsion scale h must be positive")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def ce_loss_weighted(logits: Tensor, labels, class_weights=None) -> Tensor:
    """Mean weighted negative log-softmax over rows.

    Rank-1 logits are treated as a single row. Weights default to 1 per
    class; out-of-range labels raise.
    """
    if logits.ndim == 1:
        logits = ad.reshape(logits, (1, logits.shape[0]))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = logits.shape
    lp = ad.log_softmax(logits, axis=1)
    picked = ad.pick_labels(lp, labels)
    if class_weights is not None:
        w = np.asarray(class_weights, dtype=np.float64)[labels]
    else:
        w = np.ones(n)
    return ad.scale(ad.tsum(ad.mul(picked, ad.constant(w))), -1.0 / n)


def _neighbors_excluding_self(coords: np.ndarray, k: int) -> np.ndarray:
    """k nearest neighbor indices per point with the point itself removed,
    robust to coincident points (where the self column is ambiguous)."""
    n = coords.shape[0]
    idx = knn_query(coords, coords, min(k + 1, n))
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        row = idx[i][idx[i] != i]
        out[i] = row[:k]
    return out


def repulsion_loss(sampled_coords: Tensor, k_rep: int, h: float) -> Tensor:
    """Gaussian-kernel penalty sum over each point's k_rep nearest other
    points: sum of exp(-r^2 / h^2) over directed close pairs.

    Differentiable in the coordinates, so the gradient pushes adapted
    sample positions apart.
    """
    coords = sampled_coords if isinstance(sampled_coords, Tensor) else Tensor(sampled_coords)
    n = coords.shape[0]
    if n < 2:
        raise ValueError("repulsion needs at least 2 sampled points")
    if h <= 0:
        raise ValueError("repulsion scale h must be positive")
    k = min(k_rep, n - 1)
    nbr = _neighbors_excluding_self(coords.data, k)
    gathered = ad.gather_rows(coords, nbr)                      # [N, k, 3]
    diff = ad.sub(gathered, ad.reshape(coords, (n, 1, 3)))
    d2 = ad.tsum(ad.mul(diff, diff), axis=2)
    return ad.tsum(ad.exp(ad.scale(d2, -1.0 / (h * h))))


def inverse_frequency_weights(clouds: list[PointCloud], n_classes: int) -> np.ndarray:
    """Per-class weights proportional to inverse label frequency over the
    training set, normalized to mean 1. Unseen classes get weight 1."""
    counts = np.zeros(n_classes)
    for pc in clouds:
        if pc.labels is None:
            raise ValueError("inverse-frequency weights need per-point labels")
        counts += np.bincount(pc.labels, minlength=n_classes)
    w = np.ones(n_classes)
    seen = counts > 0
    w[seen] = counts[seen].sum() / (seen.sum() * counts[seen])
    w[seen] /= w[seen].mean()
    return w


# ---------------------------------------------------------------------------
# encoder layer
# ---------------------------------------------------------------------------

class EncoderLayer:
    """Adaptive sampling followed by the local-nonlocal block."""

    def __init__(self, store: ParamStore, name: str, cfg: LayerConfig, d_in: int,
                 rng: np.random.Generator, fuse_mode: str = "both",
                 use_as: bool = True, init: str = "fps",
                 weighting: str = "group-feature", skip: bool = False):
        if cfg.d_out < d_in:
            raise ValueError(
                f"layer '{name}' narrows channels {d_in} -> {cfg.d_out}; encoder "
                "widths must not decrease")
        self.cfg = cfg
        self.d_in = d_in
        self.d_out = cfg.d_out
        self.fuse_mode = fuse_mode
        self.init = init
        self.weighting = weighting
        self.use_as = use_as and cfg.as_neighbor > 0
        self.skip = skip
        self.as_params = ASParams(store, f"{name}.as", d_in, rng) if (
            self.use_as and weighting == "group-feature") else None
        self.pl = PLParams(store, f"{name}.pl", d_in, cfg.d_out, rng) if (
            fuse_mode in ("both", "local")) else None
        self.pnl = PNLParams(store, f"{name}.pnl", d_in, cfg.d_out, rng) if (
            fuse_mode in ("both", "nonlocal")) else None
        self.fuse = FuseParams(store, f"{name}.fuse", cfg.d_out, rng) if (
            fuse_mode == "both") else None
        self.shortcut = None
        if skip and d_in != cfg.d_out:
            self.shortcut = LinearMap(store, f"{name}.shortcut", d_in, cfg.d_out, rng)

    def forward(self, coords: Tensor, feats: Tensor, training: bool,
                rng: np.random.Generator | None = None, fps_start: int = 0):
        n = coords.shape[0]
        npoint = min(self.cfg.npoint, n)
        nsample = min(self.cfg.nsample, n)
        as_k = min(self.cfg.as_neighbor, n) if self.use_as else 0
        aso = adaptive_sample(coords, feats, npoint, as_k, self.as_params,
                              init=self.init, weighting=self.weighting,
                              start=fps_start, rng=rng)
        new_coords, qfeats = aso.new_coords, aso.query_feats

        nbr = knn_query(new_coords.data, coords.data, nsample)
        group = group_gather(coords, feats, new_coords, nbr)
        local = pl_cell(group, self.pl, training) if self.pl is not None else None
        nonloc = pnl_cell(qfeats, feats, self.pnl, training) if self.pnl is not None else None
        out = lnl_fuse(local, nonloc, self.fuse, training, mode=self.fuse_mode)
        if self.skip:
            residual = self.shortcut(qfeats) if self.shortcut is not None else qfeats
            out = ad.add(out, residual)
        return new_coords, out, aso


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

def _base_config_dict(kind, configs, n_classes, in_channels, variant, sampling,
                      weighting, head_dims, dropout, seed):
    return {
        "kind": kind,
        "layers": [[c.npoint, c.nsample, c.as_neighbor, list(c.mlp)] for c in configs],
        "n_classes": n_classes,
        "in_channels": in_channels,
        "variant": variant,
        "sampling": sampling,
        "weighting": weighting,
        "head_dims": list(head_dims),
        "dropout": dropout,
        "seed": seed,
    }


def _variant_parts(variant: str) -> tuple[str, bool]:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant '{variant}' (expected one of {VARIANTS})")
    use_as = variant.endswith("+as")
    base = variant[:-3] if use_as else variant
    fuse_mode = {"pl": "local", "pnl": "nonlocal", "pl+pnl": "both"}[base]
    return fuse_mode, use_as


class _ModelBase:
    def config_dict(self) -> dict:
        return self._config

    def digest(self) -> bytes:
        blob = json.dumps(self._config, sort_keys=True).encode()
        return hashlib.sha256(blob).digest()

    def _input_feats(self, coords: np.ndarray, feats: np.ndarray | None) -> Tensor:
        if feats is None:
            feats = coords.copy()
        feats = np.asarray(feats, dtype=np.float64)
        if feats.shape[1] != self.in_channels:
            raise ValueError(
                f"model expects {self.in_channels} feature channels, got {feats.shape[1]}")
        return ad.constant(feats)


class Classifier(_ModelBase):
    """Hierarchical classifier: abstraction layers, global pooling of the
    last two layer outputs, then a fully-connected head with dropout.

    The final config row must have npoint == 1; its channel list is the
    perceptron stack applied to the pooled global vector. That stack and
    the head run on single vectors, so they use plain linear + ReLU
    (batch statistics are undefined for one row).
    """

    task = "classify"

    def __init__(self, configs: list[LayerConfig], n_classes: int, in_channels: int = 3,
                 variant: str = "pl+pnl+as", sampling: str = "fps",
                 weighting: str = "group-feature", head_dims: tuple[int, ...] = (512, 256),
                 dropout: float = 0.4, seed: int = 0):
        if len(configs) < 3 or configs[-1].npoint != 1:
            raise ValueError("classifier needs >= 2 abstraction layers plus a final "
                             "global row with npoint == 1")
        enc_cfgs, global_cfg = list(configs[:-1]), configs[-1]
        if any(c.npoint == 1 for c in enc_cfgs):
            raise ValueError("only the final row may have npoint == 1")
        for prev, nxt in zip(enc_cfgs, enc_cfgs[1:]):
            if nxt.npoint > prev.npoint:
                raise ValueError("npoint must not increase across layers")
        fuse_mode, use_as = _variant_parts(variant)
        self._config = _base_config_dict("classifier", configs, n_classes, in_channels,
                                         variant, sampling, weighting, head_dims,
                                         dropout, seed)
        self.n_classes = n_classes
        self.in_channels = in_channels
        self.variant = variant
        self.dropout = dropout
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        self.layers: list[EncoderLayer] = []
        d = in_channels
        for i, cfg in enumerate(enc_cfgs):
            layer = EncoderLayer(self.store, f"enc{i}", cfg, d, rng,
                                 fuse_mode=fuse_mode, use_as=use_as, init=sampling,
                                 weighting=weighting, skip=i < 2)
            self.layers.append(layer)
            d = layer.d_out
        pooled = self.layers[-2].d_out + self.layers[-1].d_out
        self.global_mlp: list[LinearMap] = []
        d = pooled
        for j, width in enumerate(global_cfg.mlp):
            self.global_mlp.append(LinearMap(self.store, f"global.{j}", d, width, rng))
            d = width
        self.head: list[LinearMap] = []
        for j, width in enumerate(head_dims):
            self.head.append(LinearMap(self.store, f"head.{j}", d, width, rng))
            d = width
        self.head_out = LinearMap(self.store, "head.out", d, n_classes, rng)

    def forward(self, coords: np.ndarray, feats: np.ndarray | None = None,
                training: bool = False, rng: np.random.Generator | None = None,
                fps_start: int = 0):
        coords_t = ad.constant(np.asarray(coords, dtype=np.float64))
        feats_t = self._input_feats(coords_t.data, feats)
        aux: dict = {"sample_coords": []}
        outputs = []
        c, f = coords_t, feats_t
        for layer in self.layers:
            c, f, aso = layer.forward(c, f, training, rng=rng, fps_start=fps_start)
            aux["sample_coords"].append(c)
            outputs.append(f)
        pooled = ad.concat([maxpool_set(outputs[-2]), maxpool_set(outputs[-1])], axis=0)
        x = pooled
        for lin in self.global_mlp:
            x = ad.relu(lin(x))
        for lin in self.head:
            x = ad.relu(lin(x))
            if training and self.dropout > 0:
                if rng is None:
                    raise ValueError("training forward with dropout needs an rng")
                x = dropout_mask(x, self.dropout, rng, training=True)
        logits = self.head_out(x)
        aux["first_layer_coords"] = aux["sample_coords"][0]
        return logits, aux


class Segmenter(_ModelBase):
    """Encoder-decoder for per-point labeling.

    The decoder mirrors the encoder: features propagate back level by
    level through 3-nearest interpolation, concatenation with the encoder
    skip features, a per-point merge projection, and a local-nonlocal
    block over the level's full point set.
    """

    task = "segment"

    def __init__(self, enc_configs: list[LayerConfig], n_classes: int,
                 in_channels: int = 3, variant: str = "pl+pnl+as",
                 sampling: str = "fps", weighting: str = "group-feature",
                 head_dims: tuple[int, ...] = (), dropout: float = 0.4, seed: int = 0):
        if len(enc_configs) < 2:
            raise ValueError("segmenter needs at least 2 encoder layers")
        for cfg in enc_configs:
            if cfg.npoint < 3:
                raise ValueError("encoder npoint must be >= 3 so 3-nearest "
                                 "interpolation stays defined")
        for prev, nxt in zip(enc_configs, enc_configs[1:]):
            if nxt.npoint >= prev.npoint:
                raise ValueError("encoder npoint must strictly decrease")
        fuse_mode, use_as = _variant_parts(variant)
        self._config = _base_config_dict("segmenter", enc_configs, n_classes,
                                         in_channels, variant, sampling, weighting,
                                         head_dims, dropout, seed)
        self.n_classes = n_classes
        self.in_channels = in_channels
        self.variant = variant
        self.dropout = dropout
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        self.enc_layers: list[EncoderLayer] = []
        d = in_channels
        for i, cfg in enumerate(enc_configs):
            layer = EncoderLayer(self.store, f"enc{i}", cfg, d, rng,
                                 fuse_mode=fuse_mode, use_as=use_as, init=sampling,
                                 weighting=weighting, skip=i < 2)
            self.enc_layers.append(layer)
            d = layer.d_out

        # decoder stage s propagates level s+1 -> level s (level 0 = input)
        self.dec_merge: list[LinearMap] = []
        self.dec_blocks: list[tuple[PLParams, PNLParams, FuseParams]] = []
        self.dec_widths: list[int] = []
        self.dec_nsample: list[int] = []
        n_levels = len(enc_configs)
        for s in range(n_levels - 1, -1, -1):
            upper = enc_configs[s].d_out if s == n_levels - 1 else self.dec_widths[-1]
            skip_d = in_channels if s == 0 else enc_configs[s - 1].d_out
            width = enc_configs[0].d_out if s == 0 else enc_configs[s - 1].d_out
            self.dec_widths.append(width)
            self.dec_nsample.append(enc_configs[max(s - 1, 0)].nsample)
            self.dec_merge.append(
                LinearMap(self.store, f"dec{s}.merge", upper + skip_d, width, rng))
            self.dec_blocks.append((
                PLParams(self.store, f"dec{s}.pl", width, width, rng),
                PNLParams(self.store, f"dec{s}.pnl", width, width, rng),
                FuseParams(self.store, f"dec{s}.fuse", width, rng),
            ))
        head_w = self.dec_widths[-1]
        self.head = LinearMap(self.store, "head.0", head_w, head_w, rng)
        self.head_out = LinearMap(self.store, "head.out", head_w, n_classes, rng)

    def forward(self, coords: np.ndarray, feats: np.ndarray | None = None,
                training: bool = False, rng: np.random.Generator | None = None,
                fps_start: int = 0):
        coords_t = ad.constant(np.asarray(coords, dtype=np.float64))
        feats_t = self._input_feats(coords_t.data, feats)
        aux: dict = {"sample_coords": [], "interp_weight_err": 0.0}
        level_coords = [coords_t]
        level_feats = [feats_t]
        c, f = coords_t, feats_t
        for layer in self.enc_layers:
            c, f, aso = layer.forward(c, f, training, rng=rng, fps_start=fps_start)
            aux["sample_coords"].append(c)
            level_coords.append(c)
            level_feats.append(f)

        d_feats = level_feats[-1]
        n_levels = len(self.enc_layers)
        for stage, s in enumerate(range(n_levels - 1, -1, -1)):
            fine_c, coarse_c = level_coords[s], level_coords[s + 1]
            interp, w = three_nn_interpolate(fine_c, coarse_c, d_feats,
                                             return_weights=True)
            aux["interp_weight_err"] = max(
                aux["interp_weight_err"], float(np.abs(w.sum(axis=1) - 1.0).max()))
            merged = ad.concat([interp, level_feats[s]], axis=1)
            merged = ad.relu(self.dec_merge[stage](merged))
            pl_p, pnl_p, fuse_p = self.dec_blocks[stage]
            n_here = fine_c.shape[0]
            nbr = knn_query(fine_c.data, fine_c.data, min(self.dec_nsample[stage], n_here))
            group = group_gather(fine_c, merged, fine_c, nbr)
            local = pl_cell(group, pl_p, training)
            nonloc = pnl_cell(merged, merged, pnl_p, training)
            d_feats = lnl_fuse(local, nonloc, fuse_p, training, mode="both")

        x = ad.relu(self.head(d_feats))
        if training and self.dropout > 0:
            if rng is None:
                raise ValueError("training forward with dropout needs an rng")
            x = dropout_mask(x, self.dropout, rng, training=True)
        logits = self.head_out(x)
        aux["first_layer_coords"] = aux["sample_coords"][0]
        return logits, aux


def build_classifier(configs: list[LayerConfig], n_classes: int, **kwargs) -> Classifier:
    return Classifier(configs, n_classes, **kwargs)


def build_segmenter(enc_configs: list[LayerConfig], n_classes: int, **kwargs) -> Segmenter:
    return Segmenter(enc_configs, n_classes, **kwargs)


# ---------------------------------------------------------------------------
# joint objective
# ---------------------------------------------------------------------------

def _cloud_labels(model, pc: PointCloud):
    if model.task == "classify":
        if pc.class_id is None:
            raise ValueError("classification needs a cloud class_id")
        return np.array([pc.class_id])
    if pc.labels is None:
        raise ValueError("segmentation needs per-point labels")
    return pc.labels


def total_loss(model, batch: list[PointCloud], cfg: LossConfig,
               training: bool = True, rng: np.random.Generator | None = None):
    """Joint objective over a batch: mean cross entropy + alpha * mean
    repulsion (first-layer samples only) + beta * squared weight norm."""
    ce_terms = []
    rep_terms = []
    for pc in batch:
        logits, aux = model.forward(pc.coords, pc.feats, training=training, rng=rng)
        ce_terms.append(ce_loss_weighted(logits, _cloud_labels(model, pc),
                                         cfg.class_weights))
        if cfg.alpha > 0:
            h = cfg.h if cfg.h is not None else 2.0 * mean_nn_distance(pc.coords)
            rep_terms.append(repulsion_loss(aux["first_layer_coords"], cfg.k_rep, h))
    loss = ad.scale(_sum_tensors(ce_terms), 1.0 / len(batch))
    parts = {"ce": float(loss.data)}
    if rep_terms:
        rep = ad.scale(_sum_tensors(rep_terms), 1.0 / len(batch))
        parts["rep"] = float(rep.data)
        loss = ad.add(loss, ad.scale(rep, cfg.alpha))
    if cfg.beta > 0:
        l2 = model.store.sq_norm_decay()
        parts["l2"] = float(l2.data)
        loss = ad.add(loss, ad.scale(l2, cfg.beta))
    parts["total"] = float(loss.data)
    return loss, parts


def _sum_tensors(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


# ---------------------------------------------------------------------------
# optimizer / training
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    """Optimizer state: Adam hyperparameters, step counter, and the rng
    used for shuffling, augmentation, and dropout."""

    store: ParamStore
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "constant"
    total_steps: int = 0
    seed: int = 0
    step: int = 0
    rng: np.random.Generator = field(init=False)

    def __post_init__(self):
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule '{self.schedule}'")
        self.rng = np.random.default_rng(self.seed)

    def current_lr(self) -> float:
        if self.schedule == "cosine" and self.total_steps > 0:
            frac = min(self.step, self.total_steps) / self.total_steps
            return self.lr * 0.5 * (1.0 + np.cos(np.pi * frac))
        return self.lr


def train_step(model, state: TrainState, batch: list[PointCloud],
               cfg: LossConfig) -> tuple[TrainState, float]:
    """One forward/backward/Adam update. Returns the state and the
    pre-update loss value; raises DivergenceError on a non-finite loss."""
    state.store.zero_grad()
    loss, parts = total_loss(model, batch, cfg, training=True, rng=state.rng)
    value = float(loss.data)
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite loss at step {state.step}: parts={parts}")
    loss.backward()
    state.step += 1
    lr = state.current_lr()
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for _, e in state.store.trainable_items():
        g = e.param.grad
        e.moment1 *= b1
        e.moment1 += (1.0 - b1) * g
        e.moment2 *= b2
        e.moment2 += (1.0 - b2) * g * g
        e.param.data -= lr * (e.moment1 / bc1) / (np.sqrt(e.moment2 / bc2) + state.eps)
    return state, value


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(model, dataset: list[PointCloud],
             rng: np.random.Generator | None = None) -> dict[str, float]:
    """Eval-mode metrics: overall accuracy, mean per-class accuracy, and
    mean IoU (classes absent from both prediction and truth excluded)."""
    if not dataset:
        raise ValueError("cannot evaluate an empty dataset")
    c = model.n_classes
    confusion = np.zeros((c, c), dtype=np.int64)
    with ad.no_grad():
        for pc in dataset:
            logits, _ = model.forward(pc.coords, pc.feats, training=False, rng=rng)
            truth = _cloud_labels(model, pc)
            pred = np.atleast_2d(logits.data).argmax(axis=1)
            np.add.at(confusion, (truth, pred), 1)
    total = confusion.sum()
    correct = np.trace(confusion)
    tp = np.diag(confusion)
    fn = confusion.sum(axis=1) - tp
    fp = confusion.sum(axis=0) - tp
    union = tp + fn + fp
    present_gt = confusion.sum(axis=1) > 0
    per_class = tp[present_gt] / confusion.sum(axis=1)[present_gt]
    iou = tp[union > 0] / union[union > 0]
    return {
        "overall_accuracy": float(correct / total),
        "per_class_accuracy": float(per_class.mean()),
        "mIoU": float(iou.mean()),
    }


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"PLNLCKPT"
_CKPT_VERSION = 1


def save_checkpoint(path, store: ParamStore, digest: bytes, step: int) -> None:
    """Binary container: magic, version byte, config digest, step, then
    every entry (name, shape, value, both Adam moments) as little-endian
    doubles."""
    if len(digest) != 32:
        raise ValueError("digest must be 32 bytes")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<B", _CKPT_VERSION))
        f.write(digest)
        f.write(struct.pack("<Q", step))
        names = sorted(store.entries())
        f.write(struct.pack("<I", len(names)))
        for name in names:
            e = store.entry(name)
            raw = name.encode()
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            shape = e.param.data.shape
            f.write(struct.pack("<B", len(shape)))
            f.write(struct.pack(f"<{len(shape)}I", *shape))
            for arr in (e.param.data, e.moment1, e.moment2):
                f.write(arr.astype("<f8").tobytes())


def load_checkpoint(path, store: ParamStore, expect_digest: bytes | None = None) -> int:
    """Restore parameters and optimizer moments in place; returns the
    stored step. Raises on magic/version/digest/name/shape mismatch."""
    with open(path, "rb") as f:
        if f.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<B", f.read(1))
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        digest = f.read(32)
        if expect_digest is not None and digest != expect_digest:
            raise ValueError(f"{path}: checkpoint was written for a different model "
                             "configuration")
        (step,) = struct.unpack("<Q", f.read(8))
        (count,) = struct.unpack("<I", f.read(4))
        seen = set()
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode()
            (rank,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            size = int(np.prod(shape)) if shape else 1
            if name not in store:
                raise ValueError(f"{path}: unknown parameter '{name}'")
            e = store.entry(name)
            if tuple(e.param.data.shape) != tuple(shape):
                raise ValueError(f"{path}: shape mismatch for '{name}': "
                                 f"{shape} vs {e.param.data.shape}")
            for arr in (e.param.data, e.moment1, e.moment2):
                arr[...] = np.frombuffer(f.read(8 * size), dtype="<f8").reshape(shape)
            seen.add(name)
        missing = set(store.entries()) - seen
        if missing:
            raise ValueError(f"{path}: missing parameters {sorted(missing)[:3]}...")
    return step
