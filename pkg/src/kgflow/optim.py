"""Adam with global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    learning_rate: float = 1e-3
    clip_norm: float | None = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def ensure(self, params: Mapping[str, Tensor]) -> None:
        for name, p in params.items():
            if name not in self.first_moment:
                self.first_moment[name] = np.zeros_like(p.data)
                self.second_moment[name] = np.zeros_like(p.data)
            elif self.first_moment[name].shape != p.shape:
                raise ValueError(f"moment shape {self.first_moment[name].shape} does not match parameter {name} {p.shape}")


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_by_global_norm(grads: Mapping[str, np.ndarray], clip_norm: float | None) -> tuple[dict[str, np.ndarray], float]:
    norm = global_norm(grads)
    if clip_norm is None or norm <= clip_norm:
        return dict(grads), norm
    scale = clip_norm / norm
    return {k: (g * scale).astype(g.dtype, copy=False) for k, g in grads.items()}, norm


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimizerState) -> float:
    """Clip, then apply one bias-corrected Adam update in place.

    Returns the global gradient norm measured before clipping.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteGradientError(f"gradient of {name} has {bad} non-finite entries")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {params[name].shape}")
    state.ensure(params)
    clipped, norm = clip_by_global_norm(grads, state.clip_norm)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in clipped.items():
        p = params[name]
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.dtype, copy=False)
    return norm
