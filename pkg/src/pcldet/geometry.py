"""Bounding-box arithmetic: IoU and non-maximum suppression.

Boxes are (x1, y1, x2, y2) in continuous image coordinates with x1 < x2 and
y1 < y2. Everything spatial in the pipeline goes through these helpers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

__all__ = ["Detection", "validate_boxes", "box_area", "iou", "iou_matrix", "nms"]


def validate_boxes(boxes) -> np.ndarray:
    """Coerce to an (N, 4) float64 array and check box invariants.

    Raises DataError for non-finite coordinates or empty boxes (x1 >= x2 or
    y1 >= y2).
    """
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, 4)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise DataError(f"boxes must have shape (N, 4), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError("box coordinates must be finite")
    if np.any(arr[:, 2] <= arr[:, 0]) or np.any(arr[:, 3] <= arr[:, 1]):
        raise DataError("boxes must satisfy x1 < x2 and y1 < y2")
    return arr


def box_area(box) -> float:
    b = np.asarray(box, dtype=np.float64)
    return float((b[2] - b[0]) * (b[3] - b[1]))


def iou(a, b) -> float:
    """Intersection-over-union of two boxes, continuous (area-based)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ix1 = max(a[0], b[0])
    iy1 = max(a[1], b[1])
    ix2 = min(a[2], b[2])
    iy2 = min(a[3], b[3])
    iw = ix2 - ix1
    ih = iy2 - iy1
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = box_area(a) + box_area(b) - inter
    return float(inter / union)


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise IoU between two box sets, shape (len(a), len(b))."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    iw = np.clip(ix2 - ix1, 0.0, None)
    ih = np.clip(iy2 - iy1, 0.0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


@dataclass(frozen=True)
class Detection:
    """One scored box for one object class (class ids are 1..C)."""

    box: tuple[float, float, float, float]
    class_id: int
    score: float

    def as_record(self, image_id: str) -> dict:
        x1, y1, x2, y2 = self.box
        return {
            "image_id": image_id,
            "class_id": self.class_id,
            "x1": x1,
            "y1": y1,
            "x2": x2,
            "y2": y2,
            "score": self.score,
        }


def nms(dets: list[Detection], threshold: float) -> list[Detection]:
    """Greedy non-maximum suppression over same-class detections.

    Repeatedly keeps the highest-scoring remaining detection and discards
    every remaining one with IoU > threshold against it. Score ties are
    broken by lower original index. Output is sorted by score descending.
    """
    if not 0.0 < threshold < 1.0:
        raise DataError(f"nms threshold must lie in (0, 1), got {threshold}")
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    boxes = np.array([dets[i].box for i in order], dtype=np.float64)
    suppressed = np.zeros(len(order), dtype=bool)
    kept: list[Detection] = []
    for pos in range(len(order)):
        if suppressed[pos]:
            continue
        kept.append(dets[order[pos]])
        if pos + 1 < len(order):
            rest = np.flatnonzero(~suppressed[pos + 1 :]) + pos + 1
            overlaps = iou_matrix(boxes[pos : pos + 1], boxes[rest])[0]
            suppressed[rest[overlaps > threshold]] = True
    return kept
