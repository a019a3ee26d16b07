"""End-to-end glue: the combined model, full-image segmentation and the
evaluation harness."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .data import LabeledSample, crop_rect_for_box, nearest_resize_array
from .detection import BackboneConfig, DetectorConfig, DetectorModel, Detection, detect
from .geometry import iou
from .metrics import MetricsReport, aggregate_metrics, compute_metrics
from .segmenter import LESION_CHANNEL, SegmenterNet, SegmenterConfig
from .tensor import Tensor, bilinear_resize_array, load_checkpoint, no_grad, save_checkpoint
from .nn import load_params

MASK_THRESHOLD = 0.5
CROP_MARGIN = 0.1


@dataclass
class PipelineModel:
    """Detector plus segmenter, saved and restored as one checkpoint."""

    detector: DetectorModel
    segmenter: SegmenterNet

    def parameters(self):
        out = {f"detector.{k}": v for k, v in self.detector.parameters().items()}
        out.update({f"segmenter.{k}": v for k, v in self.segmenter.parameters().items()})
        return out

    def save(self, path) -> None:
        det_cfg = asdict(self.detector.config)
        det_cfg["backbone"] = asdict(self.detector.config.backbone)
        scalars = {
            "detector_config": det_cfg,
            "segmenter_config": asdict(self.segmenter.config),
        }
        save_checkpoint(path, {k: v.data for k, v in self.parameters().items()}, scalars)

    @classmethod
    def load(cls, path) -> "PipelineModel":
        arrays, scalars = load_checkpoint(path)
        det_cfg = dict(scalars["detector_config"])
        det_cfg["backbone"] = BackboneConfig(channels=tuple(det_cfg["backbone"]["channels"]))
        det_cfg["anchor_scales"] = tuple(det_cfg["anchor_scales"])
        det_cfg["anchor_ratios"] = tuple(det_cfg["anchor_ratios"])
        seg_cfg = dict(scalars["segmenter_config"])
        seg_cfg["dilation_rates"] = tuple(seg_cfg["dilation_rates"])
        model = cls(
            detector=DetectorModel(DetectorConfig(**det_cfg)),
            segmenter=SegmenterNet(SegmenterConfig(**seg_cfg)),
        )
        load_params(model.parameters(), arrays)
        return model


def segment_crop(image: np.ndarray, rect: tuple[int, int, int, int], segmenter: SegmenterNet,
                 threshold: float = MASK_THRESHOLD) -> np.ndarray:
    """Segment one integer pixel rect of the image; returns the binary mask
    at the rect's original size."""
    r0, r1, c0, c1 = rect
    s = segmenter.config.input_size
    crop = bilinear_resize_array(image[r0:r1, c0:c1], s, s)
    with no_grad():
        probs = segmenter(Tensor(crop))
    binary = (probs.data[..., LESION_CHANNEL] >= threshold).astype(np.uint8)
    return nearest_resize_array(binary, r1 - r0, c1 - c0)


def segment_full(image: np.ndarray, detector: DetectorModel, segmenter: SegmenterNet,
                 margin: float = CROP_MARGIN,
                 threshold: float = MASK_THRESHOLD) -> tuple[np.ndarray, Detection | None]:
    """Detect, crop the top detection with a margin, segment, paste back.

    Returns a full-size binary mask and the detection used; with no detection
    the mask is empty and the detection is None.
    """
    h, w = image.shape[:2]
    full = np.zeros((h, w), dtype=np.uint8)
    detections = detect(image, detector)
    if not detections:
        return full, None
    det = detections[0]
    rect = crop_rect_for_box(det.box, margin, h, w)
    r0, r1, c0, c1 = rect
    full[r0:r1, c0:c1] = segment_crop(image, rect, segmenter, threshold)
    return full, det


def best_detection_iou(sample: LabeledSample, detector: DetectorModel) -> float:
    """Highest IoU between any emitted detection and the ground-truth box."""
    detections = detect(sample.image, detector)
    if not detections:
        return 0.0
    return max(iou(d.box, sample.gt_box) for d in detections)


def detection_accuracy(samples: Sequence[LabeledSample], detector: DetectorModel,
                       iou_threshold: float = 0.7) -> dict:
    """Fraction of samples whose best detection reaches the IoU threshold."""
    per_sample = [best_detection_iou(s, detector) for s in samples]
    hits = sum(1 for v in per_sample if v >= iou_threshold)
    return {
        "iou_threshold": iou_threshold,
        "accuracy": hits / len(per_sample) if per_sample else 0.0,
        "mean_best_iou": float(np.mean(per_sample)) if per_sample else 0.0,
        "per_sample": per_sample,
    }


def evaluate_segmentation(samples: Sequence[LabeledSample], model: PipelineModel,
                          threshold: float = MASK_THRESHOLD) -> tuple[list[MetricsReport], dict]:
    """Run segment_full over the samples and score against the ground truth."""
    reports = []
    for s in samples:
        pred, _ = segment_full(s.image, model.detector, model.segmenter, threshold=threshold)
        reports.append(compute_metrics(pred, s.mask))
    return reports, aggregate_metrics(reports)
