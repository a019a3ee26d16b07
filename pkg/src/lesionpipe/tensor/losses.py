"""Scalar training losses: MSE and the two cross-entropy variants.

Cross-entropy inputs are probabilities, clamped to [1e-12, 1 - 1e-12]
before the log so perfect predictions stay finite.
"""
from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .core import Tensor, _apply, _coerce

CLAMP = 1e-12


def _check_same_shape(pred: Tensor, target: Tensor, name: str) -> None:
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"{name}: pred {pred.data.shape} and target {target.data.shape} differ")


def mse(pred, target) -> Tensor:
    """Mean squared error over all components."""
    pred, target = _coerce(pred), _coerce(target)
    _check_same_shape(pred, target, "mse")
    diff = pred.data - target.data
    n = max(diff.size, 1)
    out = np.asarray(np.sum(diff * diff) / n)

    def bwd(g):
        scale = 2.0 * g.reshape(()) / n
        return scale * diff, -scale * diff

    return _apply(
        "mse",
        (pred, target),
        out,
        lambda p, t: np.asarray(np.sum((p - t) ** 2) / n),
        bwd,
    )


def binary_cross_entropy(pred, target) -> Tensor:
    """Mean -[t log p + (1-t) log(1-p)]; every element counts as one sample."""
    pred, target = _coerce(pred), _coerce(target)
    _check_same_shape(pred, target, "binary_cross_entropy")
    p = np.clip(pred.data, CLAMP, 1.0 - CLAMP)
    t = target.data
    n = max(p.size, 1)
    interior = (pred.data > CLAMP) & (pred.data < 1.0 - CLAMP)
    out = np.asarray(-np.sum(t * np.log(p) + (1.0 - t) * np.log1p(-p)) / n)

    def fwd(pa, ta):
        pc = np.clip(pa, CLAMP, 1.0 - CLAMP)
        return np.asarray(-np.sum(ta * np.log(pc) + (1.0 - ta) * np.log1p(-pc)) / n)

    def bwd(g):
        gp = g.reshape(()) * (-(t / p) + (1.0 - t) / (1.0 - p)) / n
        return gp * interior, None

    return _apply("binary_cross_entropy", (pred, target), out, fwd, bwd)


def categorical_cross_entropy(pred, target) -> Tensor:
    """Mean over samples of -sum_k t_k log p_k; the last axis indexes classes."""
    pred, target = _coerce(pred), _coerce(target)
    _check_same_shape(pred, target, "categorical_cross_entropy")
    if pred.data.ndim < 1:
        raise ShapeError("categorical_cross_entropy: inputs need a class axis")
    p = np.clip(pred.data, CLAMP, 1.0 - CLAMP)
    t = target.data
    n = max(p.size // p.shape[-1], 1)
    interior = (pred.data > CLAMP) & (pred.data < 1.0 - CLAMP)
    out = np.asarray(-np.sum(t * np.log(p)) / n)

    def fwd(pa, ta):
        return np.asarray(-np.sum(ta * np.log(np.clip(pa, CLAMP, 1.0 - CLAMP))) / n)

    def bwd(g):
        gp = -g.reshape(()) * (t / p) / n
        return gp * interior, None

    return _apply("categorical_cross_entropy", (pred, target), out, fwd, bwd)


def loss(pred, target, kind: str) -> Tensor:
    if kind in ("binary-cross-entropy", "bce"):
        return binary_cross_entropy(pred, target)
    if kind in ("categorical-cross-entropy", "cce"):
        return categorical_cross_entropy(pred, target)
    if kind == "mse":
        return mse(pred, target)
    raise ValueError(f"unknown loss kind {kind!r}")
