"""Learned building blocks: parameter storage, linear maps, batch norm,
dropout, and small per-point perceptron stacks.

Parameters live in a `ParamStore` keyed by unique names, each with a
paired gradient buffer and Adam moment buffers. Initialization is
fan-based uniform (weights) / zeros (biases) so every run is reproducible
from a seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Parameter(Tensor):
    __slots__ = ("name",)

    def __init__(self, name: str, data: np.ndarray):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)


@dataclass
class ParamEntry:
    param: Parameter
    moment1: np.ndarray
    moment2: np.ndarray
    trainable: bool = True
    decay: bool = True


class ParamStore:
    """Named collection of learnable tensors plus optimizer state."""

    def __init__(self):
        self._entries: dict[str, ParamEntry] = {}

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def entries(self) -> dict[str, ParamEntry]:
        return self._entries

    def entry(self, name: str) -> ParamEntry:
        return self._entries[name]

    def create(self, name: str, shape: tuple[int, ...], rng: np.random.Generator,
               init: str = "glorot", trainable: bool = True, decay: bool = True) -> Parameter:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name '{name}'")
        if init == "glorot":
            fan_in = shape[0] if len(shape) > 1 else shape[0]
            fan_out = shape[-1]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ValueError(f"unknown init '{init}'")
        p = Parameter(name, data)
        self._entries[name] = ParamEntry(
            p, np.zeros(shape), np.zeros(shape), trainable=trainable, decay=decay)
        return p

    def zero_grad(self) -> None:
        for e in self._entries.values():
            e.param.grad[...] = 0.0

    def trainable_items(self):
        return [(n, e) for n, e in self._entries.items() if e.trainable]

    def sq_norm_decay(self) -> Tensor:
        """Graph node for sum of squared entries of all decaying weights."""
        terms = [ad.tsum(ad.mul(e.param, e.param))
                 for e in self._entries.values() if e.decay and e.trainable]
        if not terms:
            return ad.constant(0.0)
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
        return total


class LinearMap:
    """Per-point affine map x @ W + b (the 1-D convolution of width one).

    `bias=False` drops the offset; used where a bias would be an exact
    null direction of the model (keys of a softmax attention, or any map
    feeding straight into batch normalization).
    """

    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator, bias: bool = True):
        self.d_in = d_in
        self.d_out = d_out
        self.weight = store.create(f"{name}.weight", (d_in, d_out), rng)
        self.bias = store.create(f"{name}.bias", (d_out,), rng,
                                 init="zeros", decay=False) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear_apply(x, self)


def linear_apply(x: Tensor, m: LinearMap) -> Tensor:
    """Apply a linear map along the last axis of x (any rank)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[-1] != m.d_in:
        raise ValueError(
            f"linear map expects last extent {m.d_in}, got input shape {x.shape}")
    lead = x.shape[:-1]
    flat = ad.reshape(x, (-1, m.d_in)) if x.ndim != 2 else x
    out = ad.matmul(flat, m.weight)
    if m.bias is not None:
        out = ad.add(out, m.bias)
    if x.ndim != 2:
        out = ad.reshape(out, lead + (m.d_out,))
    return out


class MLP:
    """Stack of linear maps with ReLU between layers (none after the last)."""

    def __init__(self, store: ParamStore, name: str, channels: list[int],
                 rng: np.random.Generator, bias: bool = True):
        self.layers = [LinearMap(store, f"{name}.{i}", channels[i], channels[i + 1], rng,
                                 bias=bias)
                       for i in range(len(channels) - 1)]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = ad.relu(x)
        return x


class BatchNormState:
    """Per-channel batch normalization with running statistics.

    `momentum` is the retention factor for the running stats:
    running <- momentum * running + (1 - momentum) * batch.
    """

    def __init__(self, store: ParamStore, name: str, d: int, rng: np.random.Generator,
                 momentum: float = 0.9, eps: float = 1e-5):
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        if eps <= 0.0:
            raise ValueError("eps must be positive")
        self.d = d
        self.momentum = momentum
        self.eps = eps
        self.gamma = store.create(f"{name}.gamma", (d,), rng, init="ones", decay=False)
        self.beta = store.create(f"{name}.beta", (d,), rng, init="zeros", decay=False)
        self.running_mean = store.create(
            f"{name}.running_mean", (d,), rng, init="zeros",
            trainable=False, decay=False).data
        self.running_var = store.create(
            f"{name}.running_var", (d,), rng, init="ones",
            trainable=False, decay=False).data

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batchnorm_apply(x, self, training)


def batchnorm_apply(x: Tensor, s: BatchNormState, training: bool) -> Tensor:
    """Normalize rows of x [B, D] per channel; exact backward via the graph."""
    if x.ndim != 2 or x.shape[1] != s.d:
        raise ValueError(f"batch norm expects [B, {s.d}], got {x.shape}")
    if training:
        if x.shape[0] < 2:
            raise ValueError("batch norm in training mode needs at least 2 rows")
        mu = ad.tmean(x, axis=0, keepdims=True)
        centered = ad.sub(x, mu)
        var = ad.tmean(ad.mul(centered, centered), axis=0, keepdims=True)
        inv_std = ad.pow_const(ad.add(var, ad.constant(s.eps)), -0.5)
        xhat = ad.mul(centered, inv_std)
        m = s.momentum
        s.running_mean *= m
        s.running_mean += (1.0 - m) * mu.data.ravel()
        s.running_var *= m
        s.running_var += (1.0 - m) * var.data.ravel()
    else:
        inv = 1.0 / np.sqrt(s.running_var + s.eps)
        xhat = ad.mul(ad.sub(x, ad.constant(s.running_mean)), ad.constant(inv))
    return ad.add(ad.mul(xhat, s.gamma), s.beta)


def maxpool_set(x: Tensor) -> Tensor:
    """Per-channel max over the rows of a set [N, D]; permutation invariant.

    Gradient routes to the first argmax per channel.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("maxpool_set expects a non-empty [N, D] tensor")
    return ad.tmax(x, axis=0)


def dropout_mask(x: Tensor, rate: float, rng: np.random.Generator,
                 training: bool = True) -> Tensor:
    """Inverted dropout: zero entries with probability `rate`, scale the
    survivors by 1/(1-rate). Identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ad.mul(x, ad.constant(mask))
