"""Two-stage lesion detection and segmentation pipeline.

A region-proposal detector localizes the lesion, a dense-block
encoder/decoder segments the detected crop; everything runs on a small
hand-rolled reverse-mode tensor engine.
"""

from . import data, detection, geometry, metrics, pipeline, segmenter, tensor, training
from .pipeline import PipelineModel, segment_full
from .training import TrainConfig, TrainLog, train

__version__ = "0.1.0"

__all__ = [
    "PipelineModel",
    "TrainConfig",
    "TrainLog",
    "data",
    "detection",
    "geometry",
    "metrics",
    "pipeline",
    "segment_full",
    "segmenter",
    "tensor",
    "train",
    "training",
]
