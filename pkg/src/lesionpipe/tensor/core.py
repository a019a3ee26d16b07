"""Reverse-mode differentiable tensors backed by numpy arrays.

Every array follows the height x width x channel, row-major layout and is
stored in float64 by default (float32 storage can be selected through
``set_default_dtype``; the test suite runs in float64).
"""
from __future__ import annotations

import threading
from typing import Sequence

import numpy as np

from ..errors import ShapeError

_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch tensor storage between float64 (default) and float32."""
    global _DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError("dtype must be numpy float32 or float64")
    _DTYPE = dtype


def default_dtype():
    return _DTYPE


class _EngineState(threading.local):
    def __init__(self):
        self.records: list["ComputationRecord"] = []
        self.grad_enabled = True


_state = _EngineState()


class no_grad:
    """Context manager disabling gradient bookkeeping for cheap inference."""

    def __enter__(self):
        self._prev = _state.grad_enabled
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """N-dimensional float array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op: OpRecord | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a one-element tensor")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the module-level functions do the real work
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self):
        return tmean(self)

    def reshape(self, shape):
        return reshape(self, shape)


class OpRecord:
    """One executed operation and its differentiation closure.

    ``forward_fn`` recomputes the output from raw input arrays (used for
    replay); ``backward_fn`` maps the output gradient to per-input
    gradients and is None when the output does not require gradients.
    """

    __slots__ = ("name", "inputs", "output", "forward_fn", "backward_fn")

    def __init__(self, name, inputs, output, forward_fn, backward_fn):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.forward_fn = forward_fn
        self.backward_fn = backward_fn


class ComputationRecord:
    """Ordered log of executed operations, topological by construction."""

    def __init__(self):
        self.entries: list[OpRecord] = []

    def __enter__(self):
        _state.records.append(self)
        return self

    def __exit__(self, *exc):
        _state.records.remove(self)
        return False

    def __len__(self) -> int:
        return len(self.entries)

    def leaves(self) -> list[Tensor]:
        """Tensors consumed by the record but never produced by it."""
        produced = {id(e.output) for e in self.entries}
        seen: dict[int, Tensor] = {}
        for entry in self.entries:
            for t in entry.inputs:
                if id(t) not in produced and id(t) not in seen:
                    seen[id(t)] = t
        return list(seen.values())

    def replay(self) -> list[np.ndarray]:
        """Recompute every entry's output from the stored input values."""
        return [e.forward_fn(*(t.data for t in e.inputs)) for e in self.entries]


def _apply(name: str, inputs: tuple, out_data: np.ndarray, forward_fn, backward_fn) -> Tensor:
    requires = _state.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    rec = OpRecord(name, inputs, out, forward_fn, backward_fn if requires else None)
    out.op = rec
    for record in _state.records:
        record.entries.append(rec)
    return out


def backward(loss: Tensor, record: ComputationRecord | None = None) -> None:
    """Propagate d(loss)/d(tensor) to every reachable requires_grad tensor.

    When ``record`` is given, requires_grad leaves of the record that the
    loss does not depend on receive explicit zero gradients.
    """
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")

    # iterative post-order DFS over the requires_grad subgraph
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node.op is not None:
            for inp in node.op.inputs:
                if inp.requires_grad and id(inp) not in visited:
                    stack.append((inp, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        rec = node.op
        if rec is None or node.grad is None:
            continue
        if rec.backward_fn is None:
            raise NotImplementedError(f"operation {rec.name!r} has no registered derivative")
        for inp, g in zip(rec.inputs, rec.backward_fn(node.grad)):
            if g is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = np.zeros_like(inp.data)
            inp.grad += g

    if record is not None:
        for leaf in record.leaves():
            if leaf.requires_grad and leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)


# ---------------------------------------------------------------------------
# elementwise arithmetic (same-shape or scalar operands only)

def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_binary(a: Tensor, b: Tensor, name: str) -> None:
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ShapeError(f"{name}: operand shapes {a.data.shape} and {b.data.shape} do not match")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # inverse of the scalar broadcast permitted in binary ops
    if g.shape == shape:
        return g
    return np.asarray(np.sum(g)).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_binary(a, b, "add")

    def bwd(g):
        return _reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape)

    return _apply("add", (a, b), a.data + b.data, lambda x, y: x + y, bwd)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_binary(a, b, "sub")

    def bwd(g):
        return _reduce_to(g, a.data.shape), _reduce_to(-g, b.data.shape)

    return _apply("sub", (a, b), a.data - b.data, lambda x, y: x - y, bwd)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_binary(a, b, "mul")
    ad, bd = a.data, b.data

    def bwd(g):
        return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)

    return _apply("mul", (a, b), ad * bd, lambda x, y: x * y, bwd)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_binary(a, b, "div")
    ad, bd = a.data, b.data

    def bwd(g):
        return _reduce_to(g / bd, ad.shape), _reduce_to(-g * ad / (bd * bd), bd.shape)

    return _apply("div", (a, b), ad / bd, lambda x, y: x / y, bwd)


def neg(a) -> Tensor:
    a = _coerce(a)
    return _apply("neg", (a,), -a.data, lambda x: -x, lambda g: (-g,))


def exp(a) -> Tensor:
    a = _coerce(a)
    out = np.exp(a.data)
    return _apply("exp", (a,), out, lambda x: np.exp(x), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _coerce(a)
    ad = a.data
    return _apply("log", (a,), np.log(ad), lambda x: np.log(x), lambda g: (g / ad,))


# ---------------------------------------------------------------------------
# reductions and shape manipulation

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    in_shape = a.data.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.full(in_shape, g if np.ndim(g) == 0 else g.reshape(())),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, in_shape).copy(),)

    return _apply("sum", (a,), out, lambda x: np.sum(x, axis=axis, keepdims=keepdims), bwd)


def tmean(a) -> Tensor:
    a = _coerce(a)
    n = a.data.size
    in_shape = a.data.shape
    out = np.asarray(np.mean(a.data))

    def bwd(g):
        return (np.full(in_shape, g.reshape(()) / n),)

    return _apply("mean", (a,), out, lambda x: np.asarray(np.mean(x)), bwd)


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    in_shape = a.data.shape
    return _apply(
        "reshape",
        (a,),
        a.data.reshape(shape),
        lambda x: x.reshape(shape),
        lambda g: (g.reshape(in_shape),),
    )


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(_coerce(t) for t in tensors)
    if not ts:
        raise ValueError("concat requires at least one tensor")
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return _apply(
        "concat",
        ts,
        np.concatenate([t.data for t in ts], axis=axis),
        lambda *xs: np.concatenate(xs, axis=axis),
        bwd,
    )


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = _coerce(a)
    in_shape = a.data.shape
    idx = tuple(slice(None) if d != axis % a.data.ndim else slice(start, stop) for d in range(a.data.ndim))

    def bwd(g):
        full = np.zeros(in_shape)
        full[idx] = g
        return (full,)

    return _apply(
        "slice",
        (a,),
        np.ascontiguousarray(a.data[idx]),
        lambda x: np.ascontiguousarray(x[idx]),
        bwd,
    )


def take0(a, indices) -> Tensor:
    """Select rows along the first axis; repeated indices accumulate grads."""
    a = _coerce(a)
    idx = np.asarray(indices, dtype=np.intp)
    in_shape = a.data.shape

    def bwd(g):
        full = np.zeros(in_shape)
        np.add.at(full, idx, g)
        return (full,)

    return _apply("take0", (a,), a.data[idx], lambda x: x[idx], bwd)


def gather_pixels(a, rows, cols) -> Tensor:
    """Select (row, col) positions of an [H, W, C] tensor into [n, C]."""
    a = _coerce(a)
    if a.data.ndim != 3:
        raise ShapeError(f"gather_pixels expects a rank-3 tensor, got shape {a.data.shape}")
    r = np.asarray(rows, dtype=np.intp)
    c = np.asarray(cols, dtype=np.intp)
    in_shape = a.data.shape

    def bwd(g):
        full = np.zeros(in_shape)
        np.add.at(full, (r, c), g)
        return (full,)

    return _apply("gather_pixels", (a,), a.data[r, c], lambda x: x[r, c], bwd)


# ---------------------------------------------------------------------------
# activations

def relu(a) -> Tensor:
    a = _coerce(a)
    mask = a.data > 0
    return _apply("relu", (a,), a.data * mask, lambda x: x * (x > 0), lambda g: (g * mask,))


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    s = _sigmoid_stable(a.data)
    return _apply("sigmoid", (a,), s, _sigmoid_stable, lambda g: (g * s * (1.0 - s),))


def _softmax_last(x: np.ndarray) -> np.ndarray:
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = _coerce(a)
    if a.data.shape[-1] < 1:
        raise ValueError("softmax requires a non-empty last axis")
    p = _softmax_last(a.data)

    def bwd(g):
        dot = np.sum(g * p, axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _apply("softmax", (a,), p, _softmax_last, bwd)


def activation(a, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "softmax-over-last-axis" or kind == "softmax":
        return softmax(a)
    raise ValueError(f"unknown activation kind {kind!r}")


# ---------------------------------------------------------------------------
# fully connected layer primitive

def linear(x, weight, bias) -> Tensor:
    """y = x @ weight + bias for x of shape [n] or [k, n]."""
    x, weight, bias = _coerce(x), _coerce(weight), _coerce(bias)
    xd, wd, bd = x.data, weight.data, bias.data
    if wd.ndim != 2 or bd.ndim != 1 or wd.shape[1] != bd.shape[0]:
        raise ShapeError(f"linear: weight {wd.shape} and bias {bd.shape} are inconsistent")
    if xd.shape[-1] != wd.shape[0]:
        raise ShapeError(f"linear: input {xd.shape} does not match weight {wd.shape}")
    if xd.ndim not in (1, 2):
        raise ShapeError(f"linear: input must be rank 1 or 2, got {xd.shape}")

    def bwd(g):
        if xd.ndim == 1:
            return g @ wd.T, np.outer(xd, g), g
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _apply(
        "linear",
        (x, weight, bias),
        xd @ wd + bd,
        lambda xa, wa, ba: xa @ wa + ba,
        bwd,
    )
