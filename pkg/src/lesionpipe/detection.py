"""Two-stage lesion detector: backbone, proposal head, ROI pooling, refinement head.

The proposal head predicts, per anchor, four box-regression values and one
objectness probability, read off the feature map at the centers of
non-overlapping 3x3 patches. Class probabilities are ordered
(lesion, background).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .geometry import (
    Anchor,
    Box,
    BoxCoder,
    generate_anchors,
    iou_matrix,
    nms,
)
from .nn import Conv2d, Linear
from .tensor import (
    Tensor,
    bilinear_crop,
    binary_cross_entropy,
    categorical_cross_entropy,
    concat,
    gather_pixels,
    maxpool2d,
    mse,
    no_grad,
    relu,
    reshape,
    sigmoid,
    slice_axis,
    softmax,
    take0,
)

LESION, BACKGROUND = 0, 1

POSITIVE, NEUTRAL, NEGATIVE = 1, 0, -1

# anchor scales in the config are expressed at this reference input size and
# scale proportionally with the configured size
SCALE_REFERENCE_SIZE = 512


@dataclass(frozen=True)
class BackboneConfig:
    """Small convolutional backbone: one 3x3 conv block per entry in
    ``channels``, with a 2x2 stride-2 max pool after every block but the last."""

    channels: tuple[int, ...] = (8, 16, 32, 32)

    @property
    def stride(self) -> int:
        return 2 ** (len(self.channels) - 1)

    @property
    def out_channels(self) -> int:
        return self.channels[-1]


@dataclass(frozen=True)
class DetectorConfig:
    input_size: int = 512
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    anchor_scales: tuple[float, ...] = (128.0, 256.0, 512.0)
    anchor_ratios: tuple[float, ...] = (1.0, 0.5, 2.0)
    pos_iou: float = 0.7
    neg_iou: float = 0.4
    nms_threshold: float = 0.5
    score_threshold: float = 0.5
    proposal_top_k: int = 64
    rpn_sample_cap: int = 128
    rpn_mid_channels: int = 32
    rcnn_conv_channels: int = 16
    rcnn_hidden: int = 64
    box_coder_mode: str = "offset"
    box_target_scale: float = 1.0

    def __post_init__(self):
        if self.input_size % self.backbone.stride != 0:
            raise ValueError("input size must be divisible by the backbone stride")
        for name in ("pos_iou", "neg_iou", "nms_threshold", "score_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    @property
    def effective_scales(self) -> tuple[float, ...]:
        return tuple(s * self.input_size / SCALE_REFERENCE_SIZE for s in self.anchor_scales)

    @property
    def num_anchor_types(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    @property
    def feature_map_size(self) -> int:
        return self.input_size // self.backbone.stride


class Backbone:
    def __init__(self, rng, config: BackboneConfig):
        self.config = config
        self.convs = []
        cin = 3
        for cout in config.channels:
            self.convs.append(Conv2d(rng, cin, cout, kernel_size=3, padding=1))
            cin = cout

    def __call__(self, image: Tensor) -> Tensor:
        h, w = image.data.shape[:2]
        stride = self.config.stride
        if h % stride or w % stride:
            raise ShapeError(f"image extents {h}x{w} not divisible by backbone stride {stride}")
        x = image
        last = len(self.convs) - 1
        for i, conv in enumerate(self.convs):
            x = relu(conv(x))
            if i != last:
                x = maxpool2d(x, 2, 2)
        return x

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, conv in enumerate(self.convs):
            out.update(conv.params(f"backbone.conv{i}"))
        return out


@dataclass
class RpnOutput:
    """Per-anchor regression values and objectness, plus the raw head maps."""

    offsets: Tensor        # [n_anchors, 4]
    objectness: Tensor     # [n_anchors]
    maps: Tensor           # [fmH, fmW, num_anchor_types * 5]
    num_anchor_types: int
    num_locations: int

    @property
    def num_maps(self) -> int:
        return self.maps.data.shape[-1]


class RpnHead:
    """Shared 3x3 trunk, then per anchor type five 1x1 kernels (4 regression
    maps and 1 objectness map), realized as a single 1x1 convolution whose
    output channel ``type * 5 + field`` is the field-th map of that type."""

    def __init__(self, rng, in_channels: int, mid_channels: int, num_anchor_types: int):
        self.num_anchor_types = num_anchor_types
        self.trunk = Conv2d(rng, in_channels, mid_channels, kernel_size=3, padding=1)
        self.head = Conv2d(rng, mid_channels, num_anchor_types * 5, kernel_size=1)

    def __call__(self, feature_map: Tensor) -> RpnOutput:
        fm_h, fm_w = feature_map.data.shape[:2]
        if fm_h < 3 or fm_w < 3:
            raise ShapeError(f"feature map {fm_h}x{fm_w} smaller than one 3x3 anchor patch")
        maps = self.head(relu(self.trunk(feature_map)))
        rows = np.arange(fm_h // 3) * 3 + 1
        cols = np.arange(fm_w // 3) * 3 + 1
        rr = np.repeat(rows, cols.size)
        cc = np.tile(cols, rows.size)
        n_loc = rr.size
        cells = gather_pixels(maps, rr, cc)                       # [n_loc, A*5]
        per_anchor = reshape(cells, (n_loc * self.num_anchor_types, 5))
        offsets = slice_axis(per_anchor, 1, 0, 4)
        objectness = reshape(sigmoid(slice_axis(per_anchor, 1, 4, 5)), (n_loc * self.num_anchor_types,))
        return RpnOutput(offsets, objectness, maps, self.num_anchor_types, n_loc)

    def parameters(self) -> dict[str, Tensor]:
        out = self.trunk.params("rpn.trunk")
        out.update(self.head.params("rpn.head"))
        return out


class RcnnHead:
    """Per-proposal classification and box-refinement head (weights shared
    across proposals)."""

    def __init__(self, rng, in_channels: int, conv_channels: int, hidden: int, pooled_size: int = 7):
        self.conv = Conv2d(rng, in_channels, conv_channels, kernel_size=3, padding=1)
        flat = pooled_size * pooled_size * conv_channels
        self.fc = Linear(rng, flat, hidden)
        self.cls = Linear(rng, hidden, 2)
        self.reg = Linear(rng, hidden, 4)
        self._flat = flat

    def __call__(self, pooled: Tensor) -> tuple[Tensor, Tensor]:
        x = relu(self.conv(pooled))
        x = relu(self.fc(reshape(x, (self._flat,))))
        return softmax(self.cls(x)), self.reg(x)

    def parameters(self) -> dict[str, Tensor]:
        out = self.conv.params("rcnn.conv")
        out.update(self.fc.params("rcnn.fc"))
        out.update(self.cls.params("rcnn.cls"))
        out.update(self.reg.params("rcnn.reg"))
        return out


@dataclass
class AnchorAssignment:
    """Per-anchor label (POSITIVE / NEUTRAL / NEGATIVE), matched ground-truth
    index and regression target (meaningful for positives only)."""

    labels: np.ndarray       # int8 [n_anchors]
    matched_gt: np.ndarray   # intp [n_anchors], -1 where unmatched
    targets: np.ndarray      # float [n_anchors, 4]

    @property
    def positive_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == POSITIVE)

    @property
    def negative_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == NEGATIVE)


def assign_anchor_labels(anchors: Sequence[Anchor], gt_boxes: Sequence[Box],
                         pos_thr: float = 0.7, neg_thr: float = 0.4,
                         coder: BoxCoder | None = None,
                         image_h: float = 0.0, image_w: float = 0.0) -> AnchorAssignment:
    """Threshold labeling plus the best-IoU promotion guarantee.

    IoU >= pos_thr makes an anchor positive for its best ground-truth box and
    IoU < neg_thr against every box makes it negative. Any ground-truth box
    left without a positive gets its highest-IoU anchor promoted (ties to the
    lower anchor index, skipping anchors already positive for another box).
    """
    if not gt_boxes:
        raise ValueError("assign_anchor_labels requires at least one ground-truth box")
    coder = coder or BoxCoder()
    boxes = [a.box for a in anchors]
    ious = iou_matrix(boxes, list(gt_boxes))
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(len(anchors)), best_gt]

    labels = np.full(len(anchors), NEUTRAL, dtype=np.int8)
    matched = np.full(len(anchors), -1, dtype=np.intp)
    labels[best_iou < neg_thr] = NEGATIVE
    pos = best_iou >= pos_thr
    labels[pos] = POSITIVE
    matched[pos] = best_gt[pos]

    for j in range(len(gt_boxes)):
        if np.any((labels == POSITIVE) & (matched == j)):
            continue
        column = ious[:, j].copy()
        column[(labels == POSITIVE) & (matched != j)] = -1.0  # keep other boxes' positives
        promote = int(column.argmax())
        labels[promote] = POSITIVE
        matched[promote] = j

    targets = np.zeros((len(anchors), 4))
    for i in np.flatnonzero(labels == POSITIVE):
        targets[i] = coder.encode(boxes[i], gt_boxes[matched[i]], image_h, image_w)
    return AnchorAssignment(labels, matched, targets)


@dataclass
class LossOutput:
    """Scalar loss tensor plus float values of its terms for logging."""

    total: Tensor
    terms: dict[str, float]

    def item(self) -> float:
        return self.total.item()


def rpn_loss(rpn_out: RpnOutput, assignment: AnchorAssignment, sample_cap: int = 128,
             rng: np.random.Generator | None = None) -> LossOutput:
    """Objectness binary cross-entropy over sampled anchors plus regression MSE
    over positives; neutral anchors are excluded."""
    pos = assignment.positive_indices
    neg = assignment.negative_indices
    if pos.size + neg.size == 0:
        raise ValueError("rpn_loss: no non-neutral anchors to train on")

    def sample(idx: np.ndarray) -> np.ndarray:
        if idx.size <= sample_cap:
            return idx
        if rng is None:
            return idx[:sample_cap]
        return np.sort(rng.choice(idx, size=sample_cap, replace=False))

    pos_s, neg_s = sample(pos), sample(neg)
    chosen = np.concatenate([pos_s, neg_s]).astype(np.intp)
    labels = np.concatenate([np.ones(pos_s.size), np.zeros(neg_s.size)])
    cls = binary_cross_entropy(take0(rpn_out.objectness, chosen), Tensor(labels))
    if pos_s.size:
        reg = mse(take0(rpn_out.offsets, pos_s), Tensor(assignment.targets[pos_s]))
    else:
        reg = Tensor(0.0)
    total = cls + reg
    return LossOutput(total, {"cls": cls.item(), "reg": reg.item()})


@dataclass(frozen=True)
class Proposal:
    box: Box
    objectness: float


@dataclass(frozen=True)
class Detection:
    box: Box
    class_probs: np.ndarray  # (lesion, background), sums to 1

    @property
    def lesion_prob(self) -> float:
        return float(self.class_probs[LESION])


def generate_proposals(rpn_out: RpnOutput, anchors: Sequence[Anchor],
                       image_h: float, image_w: float, top_k: int = 64,
                       coder: BoxCoder | None = None) -> list[Proposal]:
    """Decode every anchor, clip, drop degenerates, keep the top_k by
    objectness (ties to the lower anchor index)."""
    coder = coder or BoxCoder()
    scores = rpn_out.objectness.data
    offsets = rpn_out.offsets.data
    if len(anchors) != scores.shape[0]:
        raise ShapeError(f"{len(anchors)} anchors vs {scores.shape[0]} predictions")
    decoded: list[tuple[float, int, Box]] = []
    for i, anchor in enumerate(anchors):
        box = coder.decode(anchor.box, offsets[i], image_h, image_w)
        if box is not None:
            decoded.append((float(scores[i]), i, box))
    decoded.sort(key=lambda e: (-e[0], e[1]))
    return [Proposal(box, score) for score, _, box in decoded[:top_k]]


def roi_pool(feature_map: Tensor, box: Box, backbone_stride: int,
             crop_size: int = 14, pooled_window: int = 2) -> Tensor:
    """Bilinear crop-resize of the box to crop_size², then 2x2/2 max pool.

    The box is mapped to feature coordinates by the backbone stride; sampling
    is align-corners over the pixel centers the half-open box covers, so a box
    spanning the whole map makes the crop an exact identity.
    """
    fm_h, fm_w = feature_map.data.shape[:2]
    x1 = box.x1 / backbone_stride
    x2 = box.x2 / backbone_stride
    y1 = box.y1 / backbone_stride
    y2 = box.y2 / backbone_stride
    eps = 1e-9
    if x1 < -eps or y1 < -eps or x2 > fm_w + eps or y2 > fm_h + eps:
        raise ValueError(f"box {box} maps outside the {fm_h}x{fm_w} feature map")
    crop = bilinear_crop(feature_map, y1, y2, x1, x2, crop_size, crop_size)
    return maxpool2d(crop, pooled_window, pooled_window)


def match_proposals_to_gt(proposals: Sequence[Proposal], gt_boxes: Sequence[Box],
                          lesion_iou: float = 0.5, coder: BoxCoder | None = None,
                          image_h: float = 0.0, image_w: float = 0.0):
    """Label proposals lesion (IoU >= lesion_iou with some GT) or background;
    lesion proposals carry refinement targets toward their best GT."""
    coder = coder or BoxCoder()
    if not proposals:
        return [], []
    ious = iou_matrix([p.box for p in proposals], list(gt_boxes))
    labels: list[int] = []
    targets: list[np.ndarray | None] = []
    for i, p in enumerate(proposals):
        j = int(ious[i].argmax()) if gt_boxes else 0
        if gt_boxes and ious[i, j] >= lesion_iou:
            labels.append(LESION)
            targets.append(coder.encode(p.box, gt_boxes[j], image_h, image_w))
        else:
            labels.append(BACKGROUND)
            targets.append(None)
    return labels, targets


def rcnn_loss(outputs: Sequence[tuple[Tensor, Tensor]], labels: Sequence[int],
              targets: Sequence[np.ndarray | None]) -> LossOutput:
    """Categorical cross-entropy over proposals plus refinement MSE over
    lesion-labeled proposals."""
    if not outputs:
        raise ValueError("rcnn_loss: no proposals")
    probs = concat([reshape(p, (1, 2)) for p, _ in outputs], axis=0)
    onehot = np.zeros((len(outputs), 2))
    onehot[np.arange(len(outputs)), list(labels)] = 1.0
    cls = categorical_cross_entropy(probs, Tensor(onehot))
    lesion_rows = [i for i, lab in enumerate(labels) if lab == LESION]
    if lesion_rows:
        refine = concat([reshape(outputs[i][1], (1, 4)) for i in lesion_rows], axis=0)
        reg = mse(refine, Tensor(np.stack([targets[i] for i in lesion_rows])))
    else:
        reg = Tensor(0.0)
    total = cls + reg
    return LossOutput(total, {"cls": cls.item(), "reg": reg.item()})


class DetectorModel:
    """Backbone + proposal head + refinement head with a fixed anchor grid."""

    def __init__(self, config: DetectorConfig, rng: np.random.Generator | int = 0):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.config = config
        self.backbone = Backbone(rng, config.backbone)
        self.rpn = RpnHead(rng, config.backbone.out_channels, config.rpn_mid_channels,
                           config.num_anchor_types)
        self.rcnn = RcnnHead(rng, config.backbone.out_channels, config.rcnn_conv_channels,
                             config.rcnn_hidden)
        fm = config.feature_map_size
        self.anchors = generate_anchors(fm, fm, config.backbone.stride,
                                        config.effective_scales, config.anchor_ratios)
        self.coder = BoxCoder(config.box_coder_mode, config.box_target_scale)

    def parameters(self) -> dict[str, Tensor]:
        out = self.backbone.parameters()
        out.update(self.rpn.parameters())
        out.update(self.rcnn.parameters())
        return out

    def base_parameters(self) -> dict[str, Tensor]:
        return self.backbone.parameters()

    def rpn_parameters(self) -> dict[str, Tensor]:
        return self.rpn.parameters()

    def rcnn_parameters(self) -> dict[str, Tensor]:
        return self.rcnn.parameters()


def detect(image: Tensor | np.ndarray, model: DetectorModel,
           score_threshold: float | None = None,
           nms_threshold: float | None = None) -> list[Detection]:
    """Full inference path: proposals, per-proposal refinement, score filter,
    then NMS; detections come back sorted by lesion probability."""
    cfg = model.config
    score_thr = cfg.score_threshold if score_threshold is None else score_threshold
    nms_thr = cfg.nms_threshold if nms_threshold is None else nms_threshold
    if not isinstance(image, Tensor):
        image = Tensor(image)
    h, w = image.data.shape[:2]
    with no_grad():
        fm = model.backbone(image)
        rpn_out = model.rpn(fm)
        proposals = generate_proposals(rpn_out, model.anchors, h, w,
                                       top_k=cfg.proposal_top_k, coder=model.coder)
        boxes: list[Box] = []
        probs: list[np.ndarray] = []
        for p in proposals:
            pooled = roi_pool(fm, p.box, cfg.backbone.stride)
            cls_probs, refine = model.rcnn(pooled)
            if cls_probs.data[LESION] <= score_thr:
                continue
            refined = model.coder.decode(p.box, refine.data, h, w)
            if refined is None:
                continue
            boxes.append(refined)
            probs.append(cls_probs.data.copy())
    if not boxes:
        return []
    kept = nms(boxes, [float(p[LESION]) for p in probs], nms_thr)
    return [Detection(boxes[i], probs[i]) for i in kept]
