"""Dense layers and the two MLP shapes used by the flow model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

LEAKY_SLOPE = 0.2


@dataclass
class Dense:
    weight: Tensor  # (in, out)
    bias: Tensor  # (out,)

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


def dense_init(rng: np.random.Generator, n_in: int, n_out: int, name: str, dtype=np.float32) -> Dense:
    """Glorot-uniform weights and zero bias."""
    limit = np.sqrt(6.0 / (n_in + n_out))
    w = rng.uniform(-limit, limit, size=(n_in, n_out)).astype(dtype)
    return Dense(
        Tensor(w, requires_grad=True, name=f"{name}.weight"),
        Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True, name=f"{name}.bias"),
    )


def linear(x: Tensor, layer: Dense) -> Tensor:
    if x.ndim != 2 or x.shape[1] != layer.in_features:
        raise DimensionError(
            f"input of width {x.shape[-1]} does not match {layer.weight.name or 'weight'} "
            f"expecting {layer.in_features}"
        )
    return T.matmul(x, layer.weight) + layer.bias


def mlp1_forward(x: Tensor, layer: Dense, slope: float = LEAKY_SLOPE) -> Tensor:
    """``leakyReLU(x W + b)``."""
    return T.leaky_relu(linear(x, layer), slope)


def mlp2_forward(x: Tensor, layers: tuple[Dense, Dense], slope: float = LEAKY_SLOPE) -> Tensor:
    """``tanh(leakyReLU(x W1 + b1) W2 + b2)``."""
    first, second = layers
    hidden = T.leaky_relu(linear(x, first), slope)
    return T.tanh(linear(hidden, second))
