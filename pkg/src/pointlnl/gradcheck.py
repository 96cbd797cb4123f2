"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tensor
from .nn import ParamStore


class GradCheckError(RuntimeError):
    """Raised when an analytic gradient is non-finite."""


@dataclass
class GradCheckReport:
    per_param: dict[str, float]

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    def worst(self) -> tuple[str, float]:
        name = max(self.per_param, key=self.per_param.get)
        return name, self.per_param[name]


def grad_check(loss_fn: Callable[[], Tensor], store: ParamStore, h: float = 1e-5,
               param_names: list[str] | None = None) -> GradCheckReport:
    """Compare analytic gradients of a deterministic scalar loss against
    central differences with step `h`.

    `loss_fn` is re-evaluated with each parameter coordinate perturbed in
    turn, so it must be free of fresh randomness (dropout off, any
    sampling fixed). Per parameter tensor the error is
    ||analytic - numeric|| / max(1e-8, ||analytic|| + ||numeric||); the
    report holds one value per parameter name.
    """
    names = param_names if param_names is not None else [
        n for n, e in store.trainable_items()]
    store.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {}
    for name in names:
        g = store.entry(name).param.grad
        if not np.all(np.isfinite(g)):
            raise GradCheckError(f"non-finite analytic gradient for parameter '{name}'")
        analytic[name] = g.copy()

    per_param: dict[str, float] = {}
    for name in names:
        flat = store.entry(name).param.data.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = float(loss_fn().data)
            flat[i] = orig - h
            lo = float(loss_fn().data)
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * h)
        a = analytic[name].reshape(-1)
        denom = max(1e-8, float(np.linalg.norm(a)) + float(np.linalg.norm(numeric)))
        per_param[name] = float(np.linalg.norm(a - numeric)) / denom
    return GradCheckReport(per_param)
