"""Finite-difference validation of analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tensor, backward, no_grad


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
               max_components: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max over components of |analytic - central difference| / max(1, |analytic|).

    ``fn`` must map the given tensors to a scalar tensor. Components of
    requires_grad inputs are perturbed by +/- h; when an input has more than
    ``max_components`` entries a random subset of that size is checked.
    """
    inputs = list(inputs)
    out = fn(*inputs)
    if out.data.size != 1:
        raise ValueError("grad_check: fn must return a scalar tensor")
    for t in inputs:
        t.grad = None
    backward(out)

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        if not t.data.flags["C_CONTIGUOUS"]:
            t.data = np.ascontiguousarray(t.data)
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        aflat = analytic.reshape(-1)
        flat = t.data.reshape(-1)
        n = flat.size
        if max_components is not None and n > max_components:
            gen = rng if rng is not None else np.random.default_rng(0)
            indices = np.sort(gen.choice(n, size=max_components, replace=False))
        else:
            indices = range(n)
        for i in indices:
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = float(fn(*inputs).data)
            flat[i] = orig - h
            with no_grad():
                fm = float(fn(*inputs).data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            err = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]))
            if err > worst:
                worst = err
    return worst
