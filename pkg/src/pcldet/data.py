"""Trainer-facing image records.

TrainImage deliberately carries no groundtruth boxes: the training code path
only ever sees proposal boxes, raw features, and the image-level label
vector. Groundtruth lives in the dataset manifest and the evaluation module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .geometry import validate_boxes


@dataclass(frozen=True)
class TrainImage:
    image_id: str
    width: float
    height: float
    boxes: np.ndarray  # (R, 4)
    features: np.ndarray  # (R, D_raw)
    label_vector: np.ndarray  # (C,) of 0/1


def validate_train_image(image: TrainImage, num_classes: int | None = None) -> None:
    """Check trainer preconditions; raises DataError naming the image."""
    try:
        boxes = validate_boxes(image.boxes)
    except DataError as exc:
        raise DataError(f"image {image.image_id}: {exc}") from None
    if boxes.shape[0] < 1:
        raise DataError(f"image {image.image_id}: needs at least one proposal")
    feats = np.asarray(image.features)
    if feats.ndim != 2 or feats.shape[0] != boxes.shape[0]:
        raise DataError(
            f"image {image.image_id}: features must be (R, D_raw) with one row "
            f"per proposal, got {feats.shape} for R={boxes.shape[0]}"
        )
    if not np.all(np.isfinite(feats)):
        raise DataError(f"image {image.image_id}: features must be finite")
    labels = np.asarray(image.label_vector)
    if num_classes is not None and labels.shape != (num_classes,):
        raise DataError(
            f"image {image.image_id}: label vector has length {labels.shape}, "
            f"expected ({num_classes},)"
        )
    if not np.all(np.isin(labels, (0, 1))):
        raise DataError(f"image {image.image_id}: label vector must be 0/1")
    if labels.sum() < 1:
        raise DataError(f"image {image.image_id}: needs at least one positive class")
