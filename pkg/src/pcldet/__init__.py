"""Weakly supervised object detection over fixed proposal features.

An image-level-labels-only detector: a two-branch MIL head pools proposal
scores into image scores, and K refinement heads are supervised online by
proposal clusters built from the preceding stream's scores. Includes a
synthetic benchmark generator, PASCAL-style evaluation (mAP, CorLoc), an
sklearn-style estimator, and a batch CLI.
"""

from .data import TrainImage
from .errors import ConfigError, DataError, DatasetFormatError, GenerationError
from .estimator import PCLDetector
from .geometry import Detection, iou, iou_matrix, nms
from .trainer import TrainConfig, train

__all__ = [
    "TrainImage",
    "ConfigError",
    "DataError",
    "DatasetFormatError",
    "GenerationError",
    "PCLDetector",
    "Detection",
    "iou",
    "iou_matrix",
    "nms",
    "TrainConfig",
    "train",
]

__version__ = "0.1.0"
