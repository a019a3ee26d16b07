"""Parameterized layers built on the tensor engine."""
from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, conv2d, linear


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...],
                 fan_in: int, fan_out: int) -> Tensor:
    """Uniform in [-a, a] with a = sqrt(6 / (fan_in + fan_out))."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


class Conv2d:
    def __init__(self, rng, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 1, padding: int = 0, dilation: int = 1):
        k = kernel_size
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        self.weight = uniform_init(rng, (k, k, in_channels, out_channels),
                                   k * k * in_channels, k * k * out_channels)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias,
                      stride=self.stride, padding=self.padding, dilation=self.dilation)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class Linear:
    def __init__(self, rng, in_features: int, out_features: int):
        self.weight = uniform_init(rng, (in_features, out_features), in_features, out_features)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


def load_params(params: Mapping[str, Tensor], arrays: Mapping[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into existing parameter tensors by name."""
    missing = set(params) - set(arrays)
    if missing:
        raise KeyError(f"checkpoint is missing parameters: {sorted(missing)}")
    for name, tensor in params.items():
        arr = np.asarray(arrays[name], dtype=tensor.data.dtype)
        if arr.shape != tensor.data.shape:
            raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {tensor.data.shape}")
        tensor.data = arr.copy()
        tensor.grad = None
