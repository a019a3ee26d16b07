"""Box algebra: IoU, anchors, regression encode/decode, NMS.

Boxes are half-open float rectangles [x1, x2) x [y1, y2) in image-pixel
coordinates, so an integer box covers exactly the pixels whose indices fall
inside it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyMaskError

# ratio targets beyond exp(+-10) are nonsense produced by an untrained
# network; clamping keeps decode finite without touching legitimate offsets
_LOG_RATIO_LIMIT = 10.0
_SHIFT_LIMIT = 1e6


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (math.isfinite(self.x1) and math.isfinite(self.y1)
                and math.isfinite(self.x2) and math.isfinite(self.y2)):
            raise ValueError(f"box coordinates must be finite: {self}")
        if self.x2 <= self.x1 or self.y2 <= self.y1:
            raise ValueError(f"degenerate box: {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2])


@dataclass(frozen=True)
class Anchor:
    box: Box
    scale_index: int
    ratio_index: int
    grid_row: int
    grid_col: int


@dataclass(frozen=True)
class RegressionTarget:
    tx: float
    ty: float
    tw: float
    th: float

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tw, self.th])


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: Sequence[Box], b: Sequence[Box]) -> np.ndarray:
    """Pairwise IoU table of shape [len(a), len(b)]."""
    if not a or not b:
        return np.zeros((len(a), len(b)))
    aa = np.stack([box.as_array() for box in a])
    bb = np.stack([box.as_array() for box in b])
    iw = np.minimum(aa[:, None, 2], bb[None, :, 2]) - np.maximum(aa[:, None, 0], bb[None, :, 0])
    ih = np.minimum(aa[:, None, 3], bb[None, :, 3]) - np.maximum(aa[:, None, 1], bb[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (aa[:, 2] - aa[:, 0]) * (aa[:, 3] - aa[:, 1])
    area_b = (bb[:, 2] - bb[:, 0]) * (bb[:, 3] - bb[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def mask_to_bbox(mask: np.ndarray) -> Box:
    """Tight half-open box around the foreground of a binary mask."""
    ys, xs = np.nonzero(np.asarray(mask))
    if ys.size == 0:
        raise EmptyMaskError("mask has no foreground pixels")
    return Box(float(xs.min()), float(ys.min()), float(xs.max()) + 1.0, float(ys.max()) + 1.0)


def generate_anchors(fm_h: int, fm_w: int, backbone_stride: int,
                     scales: Sequence[float], ratios: Sequence[float]) -> list[Anchor]:
    """One anchor per (scale, ratio) centered on each non-overlapping 3x3 patch.

    Patch centers map to image coordinates as (grid*3 + 1.5) * backbone_stride;
    anchor area is scale**2 and width:height equals the ratio. Ordering is
    row-major over patches, then scale-major over (scale, ratio), which also
    fixes the layout of the proposal head outputs.
    """
    if fm_h < 3 or fm_w < 3:
        raise ValueError(f"feature map {fm_h}x{fm_w} smaller than one 3x3 patch")
    anchors = []
    for r in range(fm_h // 3):
        cy = (r * 3 + 1.5) * backbone_stride
        for c in range(fm_w // 3):
            cx = (c * 3 + 1.5) * backbone_stride
            for si, s in enumerate(scales):
                for ri, ratio in enumerate(ratios):
                    w = s * math.sqrt(ratio)
                    h = s / math.sqrt(ratio)
                    anchors.append(Anchor(
                        Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2),
                        si, ri, r, c,
                    ))
    return anchors


def encode_box(anchor: Box, gt: Box) -> RegressionTarget:
    """Normalized log-space offsets that move the anchor onto gt."""
    acx, acy = anchor.center
    gcx, gcy = gt.center
    return RegressionTarget(
        tx=(gcx - acx) / anchor.width,
        ty=(gcy - acy) / anchor.height,
        tw=math.log(gt.width / anchor.width),
        th=math.log(gt.height / anchor.height),
    )


def decode_box(anchor: Box, t: RegressionTarget, image_h: float, image_w: float) -> Box | None:
    """Invert encode_box, clip to the image; None when clipping degenerates it."""
    tx = min(max(t.tx, -_SHIFT_LIMIT), _SHIFT_LIMIT)
    ty = min(max(t.ty, -_SHIFT_LIMIT), _SHIFT_LIMIT)
    tw = min(max(t.tw, -_LOG_RATIO_LIMIT), _LOG_RATIO_LIMIT)
    th = min(max(t.th, -_LOG_RATIO_LIMIT), _LOG_RATIO_LIMIT)
    acx, acy = anchor.center
    cx = acx + tx * anchor.width
    cy = acy + ty * anchor.height
    w = anchor.width * math.exp(tw)
    h = anchor.height * math.exp(th)
    x1 = min(max(cx - w / 2, 0.0), image_w)
    x2 = min(max(cx + w / 2, 0.0), image_w)
    y1 = min(max(cy - h / 2, 0.0), image_h)
    y2 = min(max(cy + h / 2, 0.0), image_h)
    if x2 <= x1 or y2 <= y1:
        return None
    return Box(x1, y1, x2, y2)


class BoxCoder:
    """Regression parameterization switch.

    "offset" (default) regresses normalized log-space offsets relative to the
    anchor; "absolute" regresses box corners normalized by the image extents
    and ignores the anchor entirely. ``target_scale`` multiplies encoded
    values (and divides on decode): scaling targets up by ~1/std rebalances
    the MSE term against the classification loss without touching the loss
    functions themselves.
    """

    MODES = ("offset", "absolute")

    def __init__(self, mode: str = "offset", target_scale: float = 1.0):
        if mode not in self.MODES:
            raise ValueError(f"unknown box coder mode {mode!r}")
        if target_scale <= 0.0:
            raise ValueError("target_scale must be positive")
        self.mode = mode
        self.target_scale = target_scale

    def encode(self, anchor: Box, gt: Box, image_h: float, image_w: float) -> np.ndarray:
        if self.mode == "offset":
            raw = encode_box(anchor, gt).as_array()
        else:
            raw = np.array([gt.x1 / image_w, gt.y1 / image_h, gt.x2 / image_w, gt.y2 / image_h])
        return raw * self.target_scale

    def decode(self, anchor: Box, values: np.ndarray, image_h: float, image_w: float) -> Box | None:
        values = np.asarray(values, dtype=float) / self.target_scale
        if self.mode == "offset":
            t = RegressionTarget(float(values[0]), float(values[1]), float(values[2]), float(values[3]))
            return decode_box(anchor, t, image_h, image_w)
        x1 = min(max(float(values[0]) * image_w, 0.0), image_w)
        y1 = min(max(float(values[1]) * image_h, 0.0), image_h)
        x2 = min(max(float(values[2]) * image_w, 0.0), image_w)
        y2 = min(max(float(values[3]) * image_h, 0.0), image_h)
        if x2 <= x1 or y2 <= y1:
            return None
        return Box(x1, y1, x2, y2)


def nms(boxes: Sequence[Box], scores: Sequence[float], threshold: float) -> list[int]:
    """Greedy non-maximum suppression; kept indices in selection order.

    Score ties break toward the lower original index.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"nms threshold must lie in [0, 1], got {threshold}")
    if len(boxes) != len(scores):
        raise ValueError("nms: boxes and scores lengths differ")
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    suppressed = [False] * len(boxes)
    kept: list[int] = []
    for i in order:
        if suppressed[i]:
            continue
        kept.append(i)
        for j in order:
            if not suppressed[j] and j != i and iou(boxes[i], boxes[j]) > threshold:
                suppressed[j] = True
    return kept
