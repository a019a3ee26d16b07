"""Adam optimizer: a pure update function plus a stateful wrapper."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ..errors import ShapeError
from .core import Tensor


@dataclass
class AdamState:
    """First/second moment buffers and the shared step counter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, shapes: Iterable[tuple[int, ...]], beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        shapes = list(shapes)
        return cls(
            m=[np.zeros(s) for s in shapes],
            v=[np.zeros(s) for s in shapes],
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState, lr: float) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns fresh params and state."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("adam_step: params, grads and state lengths differ")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"adam_step: mismatched shapes {p.shape}/{g.shape}/{m.shape}")

    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_m.append(m)
        new_v.append(v)
        new_params.append(p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
    return new_params, AdamState(new_m, new_v, t, b1, b2, state.eps)


class Adam:
    """Stateful optimizer over a set of parameter tensors (updated in place)."""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState.zeros((p.data.shape for p in self.params), beta1, beta2, eps)

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new_params, self.state = adam_step([p.data for p in self.params], grads, self.state, self.lr)
        for p, nd in zip(self.params, new_params):
            p.data = nd

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
