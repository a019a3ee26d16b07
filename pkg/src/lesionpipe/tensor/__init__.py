"""Minimal reverse-mode differentiable tensor engine."""

from .adam import Adam, AdamState, adam_step
from .checkpoint import load_checkpoint, save_checkpoint
from .core import (
    ComputationRecord,
    OpRecord,
    Tensor,
    activation,
    add,
    backward,
    concat,
    default_dtype,
    div,
    exp,
    gather_pixels,
    linear,
    log,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    set_default_dtype,
    sigmoid,
    slice_axis,
    softmax,
    sub,
    take0,
    tmean,
    tsum,
)
from .gradcheck import grad_check
from .losses import binary_cross_entropy, categorical_cross_entropy, loss, mse
from .ops import (
    bilinear_crop,
    bilinear_resize,
    bilinear_resize_array,
    conv2d,
    maxpool2d,
)

__all__ = [
    "Adam",
    "AdamState",
    "ComputationRecord",
    "OpRecord",
    "Tensor",
    "activation",
    "adam_step",
    "add",
    "backward",
    "bilinear_crop",
    "bilinear_resize",
    "bilinear_resize_array",
    "binary_cross_entropy",
    "categorical_cross_entropy",
    "concat",
    "conv2d",
    "default_dtype",
    "div",
    "exp",
    "gather_pixels",
    "grad_check",
    "linear",
    "load_checkpoint",
    "log",
    "loss",
    "maxpool2d",
    "mse",
    "mul",
    "neg",
    "no_grad",
    "relu",
    "reshape",
    "save_checkpoint",
    "set_default_dtype",
    "sigmoid",
    "slice_axis",
    "softmax",
    "sub",
    "take0",
    "tmean",
    "tsum",
]
