"""Dense-block encoder/decoder segmenter with a dilated bottleneck.

The output is a per-pixel probability map over (background, lesion); channel
0 is background, channel 1 is lesion.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .nn import Conv2d
from .tensor import (
    Tensor,
    bilinear_resize,
    concat,
    div,
    maxpool2d,
    mul,
    relu,
    softmax,
    sub,
    tsum,
)

BACKGROUND_CHANNEL, LESION_CHANNEL = 0, 1

NUM_LEVELS = 3  # encoder/decoder dense blocks per branch

DICE_EPS = 1e-7


@dataclass(frozen=True)
class SegmenterConfig:
    input_size: int = 128
    layers_per_block: int = 3
    growth: int = 8
    dilation_rates: tuple[int, ...] = (1, 2, 4, 8)

    def __post_init__(self):
        if self.input_size % (2 ** NUM_LEVELS) != 0:
            raise ValueError(f"input size {self.input_size} must be divisible by {2 ** NUM_LEVELS}")
        if self.input_size // (2 ** NUM_LEVELS) < 3:
            # the bottleneck rejects grids smaller than its 3x3 kernels
            raise ValueError(f"input size {self.input_size} leaves a bottleneck grid below 3x3")
        if self.layers_per_block < 1 or self.growth < 1:
            raise ValueError("layers_per_block and growth must be >= 1")
        if any(b <= a for a, b in zip(self.dilation_rates, self.dilation_rates[1:])):
            raise ValueError("dilation rates must be strictly increasing")

    @property
    def bottleneck_size(self) -> int:
        return self.input_size // (2 ** NUM_LEVELS)


class DenseBlock:
    """Stack of 3x3 conv + relu layers where layer i consumes the
    concatenation of the block input and all previous layer outputs; the
    block output concatenates everything, adding layers * growth channels."""

    def __init__(self, rng, in_channels: int, layers: int, growth: int):
        self.in_channels = in_channels
        self.convs = [
            Conv2d(rng, in_channels + i * growth, growth, kernel_size=3, padding=1)
            for i in range(layers)
        ]
        self.out_channels = in_channels + layers * growth

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.shape[-1] != self.in_channels:
            raise ShapeError(f"dense block expects {self.in_channels} channels, got {x.data.shape[-1]}")
        feats = [x]
        for conv in self.convs:
            inp = feats[0] if len(feats) == 1 else concat(feats, axis=-1)
            feats.append(relu(conv(inp)))
        return concat(feats, axis=-1)

    def params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, conv in enumerate(self.convs):
            out.update(conv.params(f"{prefix}.layer{i}"))
        return out


class DilatedBottleneck:
    """Sequential 3x3 convolutions with increasing dilation (same padding),
    relu between, closed by a 1x1 conv restoring the input channel count."""

    def __init__(self, rng, channels: int, rates: Sequence[int]):
        self.rates = tuple(rates)
        self.convs = [
            Conv2d(rng, channels, channels, kernel_size=3, padding=r, dilation=r)
            for r in self.rates
        ]
        self.proj = Conv2d(rng, channels, channels, kernel_size=1)

    def __call__(self, x: Tensor) -> Tensor:
        h, w = x.data.shape[:2]
        if h < 3 or w < 3:
            raise ValueError(f"bottleneck input {h}x{w} smaller than a 3x3 kernel")
        for conv in self.convs:
            x = relu(conv(x))
        return relu(self.proj(x))

    def params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, conv in enumerate(self.convs):
            out.update(conv.params(f"{prefix}.dilated{i}"))
        out.update(self.proj.params(f"{prefix}.proj"))
        return out

    def receptive_field(self) -> int:
        """Receptive-field extent on the bottleneck grid (1 + 2 * sum rates)."""
        rf = 1
        for r in self.rates:
            rf += 2 * r
        return rf


class SegmenterNet:
    """Three dense-block encoder levels, dilated bottleneck, three dense-block
    decoder levels with bilinear 2x upsampling and skip concatenation."""

    def __init__(self, config: SegmenterConfig, rng: np.random.Generator | int = 0):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.config = config
        L, g = config.layers_per_block, config.growth
        self.enc_blocks: list[DenseBlock] = []
        channels = 3
        skip_channels: list[int] = []
        for _ in range(NUM_LEVELS):
            block = DenseBlock(rng, channels, L, g)
            self.enc_blocks.append(block)
            skip_channels.append(block.out_channels)
            channels = block.out_channels
        self.bottleneck = DilatedBottleneck(rng, channels, config.dilation_rates)
        self.dec_blocks: list[DenseBlock] = []
        for level in reversed(range(NUM_LEVELS)):
            block = DenseBlock(rng, channels + skip_channels[level], L, g)
            self.dec_blocks.append(block)
            channels = block.out_channels
        self.head = Conv2d(rng, channels, 2, kernel_size=1)

    def __call__(self, crop: Tensor | np.ndarray) -> Tensor:
        if not isinstance(crop, Tensor):
            crop = Tensor(crop)
        s = self.config.input_size
        if crop.data.shape != (s, s, 3):
            raise ShapeError(f"expected crop of shape {(s, s, 3)}, got {crop.data.shape}")
        skips = []
        x = crop
        for block in self.enc_blocks:
            x = block(x)
            skips.append(x)
            x = maxpool2d(x, 2, 2)
        x = self.bottleneck(x)
        for block, skip in zip(self.dec_blocks, reversed(skips)):
            h, w = skip.data.shape[:2]
            x = bilinear_resize(x, h, w)
            x = block(concat([x, skip], axis=-1))
        return softmax(self.head(x))

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, block in enumerate(self.enc_blocks):
            out.update(block.params(f"segmenter.enc{i}"))
        out.update(self.bottleneck.params("segmenter.bottleneck"))
        for i, block in enumerate(self.dec_blocks):
            out.update(block.params(f"segmenter.dec{i}"))
        out.update(self.head.params("segmenter.head"))
        return out


def make_onehot(mask: np.ndarray) -> np.ndarray:
    """Binary [H, W] mask to [H, W, 2] one-hot (background, lesion)."""
    m = np.asarray(mask)
    out = np.zeros(m.shape + (2,))
    out[..., BACKGROUND_CHANNEL] = m == 0
    out[..., LESION_CHANNEL] = m != 0
    return out


def dice_loss(probs: Tensor, onehot: Tensor | np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """One minus the class-summed overlap ratio:

        1 - sum_k [ sum_n y_nk p_nk / (sum_n y_nk + sum_n p_nk + eps) ]

    Note the ratio has no factor 2, so a perfect prediction contributes 1/2
    per class and the loss reaches ~0 only through the sum over both classes.
    This is the training loss; the evaluation Dice coefficient in the metrics
    module is the standard 2TP/(2TP+FP+FN) statistic and differs from it.
    """
    if not isinstance(onehot, Tensor):
        onehot = Tensor(onehot)
    y = onehot.data
    if y.shape != probs.data.shape:
        raise ShapeError(f"dice_loss: probs {probs.data.shape} vs one-hot {y.shape}")
    if y.ndim != 3 or y.shape[-1] != 2:
        raise ValueError(f"dice_loss: one-hot mask must be [H, W, 2], got {y.shape}")
    if not np.all((y == 0.0) | (y == 1.0)) or not np.all(y.sum(axis=-1) == 1.0):
        raise ValueError("dice_loss: ground truth is not one-hot encoded")
    spatial = (0, 1)
    inter = tsum(mul(probs, onehot), axis=spatial)                     # [2]
    denom = tsum(probs, axis=spatial) + Tensor(y.sum(axis=spatial) + eps)
    return sub(1.0, tsum(div(inter, denom)))
