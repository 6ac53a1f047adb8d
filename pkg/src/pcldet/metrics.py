"""Test-time inference and PASCAL-style evaluation (AP, mAP, CorLoc).

Detection scores are the mean object-class output of the refinement
streams (the basic stream's scores are used, and flagged, when the model
has no refinement heads). AP uses greedy IoU>0.5 matching with all-points
precision-recall interpolation; CorLoc asks whether each positive image's
single top-scoring proposal for the class overlaps some groundtruth of
that class at IoU>0.5 and is computed without NMS.
"""

from __future__ import annotations

import json
import warnings

import numpy as np

from .errors import ConfigError, DatasetFormatError
from .geometry import Detection, iou_matrix, nms, validate_boxes
from .model import ModelParams, embed, forward_basic, forward_refined

MATCH_IOU = 0.5

__all__ = [
    "class_score_matrix",
    "detect",
    "average_precision",
    "corloc",
    "evaluate",
    "write_detections",
    "read_detections",
]


def class_score_matrix(features, params: ModelParams) -> tuple[np.ndarray, bool]:
    """(C, R) detection scores: mean refined object rows, or basic scores.

    Returns (scores, used_basic) where used_basic flags the K=0 fallback.
    """
    F = embed(np.asarray(features, dtype=np.float64), params)
    k = params.num_refinements
    if k == 0:
        scores, _ = forward_basic(F, params)
        return scores, True
    acc = np.zeros((params.num_classes, F.shape[0]))
    for stream in range(1, k + 1):
        acc += forward_refined(F, params, stream)[: params.num_classes]
    return acc / k, False


def detect(
    image_boxes,
    features,
    params: ModelParams,
    nms_threshold: float = 0.3,
) -> tuple[list[Detection], bool]:
    """All per-class detections of one image after per-class NMS."""
    boxes = validate_boxes(image_boxes)
    scores, used_basic = class_score_matrix(features, params)
    out: list[Detection] = []
    for c in range(params.num_classes):
        dets = [
            Detection(box=tuple(boxes[r]), class_id=c + 1, score=float(scores[c, r]))
            for r in range(boxes.shape[0])
        ]
        out.extend(nms(dets, nms_threshold))
    return out, used_basic


def _match_class(
    detections: list[tuple[str, Detection]],
    groundtruth: dict[str, list[tuple[tuple, int]]],
    class_id: int,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Greedy TP/FP flags in score order plus the class groundtruth count."""
    gt_boxes: dict[str, np.ndarray] = {}
    gt_used: dict[str, np.ndarray] = {}
    num_gt = 0
    for image_id, entries in groundtruth.items():
        boxes = [box for box, cid in entries if cid == class_id]
        if boxes:
            gt_boxes[image_id] = np.asarray(boxes, dtype=np.float64)
            gt_used[image_id] = np.zeros(len(boxes), dtype=bool)
            num_gt += len(boxes)

    cls_dets = [
        (i, image_id, det)
        for i, (image_id, det) in enumerate(detections)
        if det.class_id == class_id
    ]
    cls_dets.sort(key=lambda t: (-t[2].score, t[1], t[0]))
    tp = np.zeros(len(cls_dets), dtype=bool)
    fp = np.zeros(len(cls_dets), dtype=bool)
    for rank, (_, image_id, det) in enumerate(cls_dets):
        boxes = gt_boxes.get(image_id)
        if boxes is None:
            fp[rank] = True
            continue
        overlaps = iou_matrix(np.asarray(det.box).reshape(1, 4), boxes)[0]
        overlaps = np.where(gt_used[image_id], -1.0, overlaps)
        best = int(np.argmax(overlaps))
        if overlaps[best] > MATCH_IOU:
            tp[rank] = True
            gt_used[image_id][best] = True
        else:
            fp[rank] = True
    return tp, fp, num_gt


def average_precision(
    detections: list[tuple[str, Detection]],
    groundtruth: dict[str, list[tuple[tuple, int]]],
    class_id: int,
) -> float | None:
    """All-points interpolated AP for one class; None when it has no groundtruth."""
    tp, fp, num_gt = _match_class(detections, groundtruth, class_id)
    if num_gt == 0:
        warnings.warn(
            f"class {class_id} has no groundtruth; AP undefined and excluded",
            stacklevel=2,
        )
        return None
    if tp.size == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    recall = tp_cum / num_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1)

    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[changed] - mrec[changed - 1]) * mpre[changed]))


def corloc(
    top_boxes: dict[str, tuple | None],
    groundtruth: dict[str, list[tuple[tuple, int]]],
    class_id: int,
) -> float | None:
    """Fraction of the given positive images whose top box hits a groundtruth.

    `top_boxes` maps every image positive for the class to its single
    top-scoring box for that class (or None when the image had no proposal).
    """
    if not top_boxes:
        warnings.warn(
            f"class {class_id} has no positive image; CorLoc undefined and excluded",
            stacklevel=2,
        )
        return None
    hits = 0
    for image_id, box in top_boxes.items():
        if box is None:
            continue
        boxes = [b for b, cid in groundtruth.get(image_id, []) if cid == class_id]
        if not boxes:
            continue
        overlaps = iou_matrix(np.asarray(box).reshape(1, 4), np.asarray(boxes))[0]
        if overlaps.max() > MATCH_IOU:
            hits += 1
    return hits / len(top_boxes)


def evaluate(
    images,
    params: ModelParams,
    nms_threshold: float = 0.3,
    collect_detections: bool = False,
) -> dict:
    """Full report over a dataset with groundtruth.

    `images` iterates records with image_id, boxes, features, label_vector,
    and groundtruth (list of (box, class_id)). Returns a JSON-ready dict
    with per-class AP and CorLoc plus their means; optionally the raw
    detections under "detections".
    """
    num_classes = params.num_classes
    all_dets: list[tuple[str, Detection]] = []
    groundtruth: dict[str, list[tuple[tuple, int]]] = {}
    top_boxes: dict[int, dict[str, tuple | None]] = {c: {} for c in range(1, num_classes + 1)}
    used_basic = params.num_refinements == 0
    for image in images:
        labels = np.asarray(image.label_vector).ravel()
        if labels.size != num_classes:
            raise ConfigError(
                f"image {image.image_id}: dataset has {labels.size} classes, "
                f"checkpoint expects {num_classes}"
            )
        groundtruth[image.image_id] = [
            (tuple(box), int(cid)) for box, cid in image.groundtruth
        ]
        dets, _ = detect(image.boxes, image.features, params, nms_threshold)
        all_dets.extend((image.image_id, d) for d in dets)
        scores, _ = class_score_matrix(image.features, params)
        boxes = validate_boxes(image.boxes)
        for c in range(1, num_classes + 1):
            if labels[c - 1] == 1:
                top = int(np.argmax(scores[c - 1]))
                top_boxes[c][image.image_id] = tuple(boxes[top])

    per_class: dict[str, dict] = {}
    ap_values: list[float] = []
    corloc_values: list[float] = []
    for c in range(1, num_classes + 1):
        ap = average_precision(all_dets, groundtruth, c)
        cl = corloc(top_boxes[c], groundtruth, c)
        per_class[str(c)] = {"ap": ap, "corloc": cl}
        if ap is not None:
            ap_values.append(ap)
        if cl is not None:
            corloc_values.append(cl)

    report = {
        "num_images": len(groundtruth),
        "num_classes": num_classes,
        "nms_threshold": nms_threshold,
        "used_basic_scores": used_basic,
        "per_class": per_class,
        "map": float(np.mean(ap_values)) if ap_values else None,
        "mean_corloc": float(np.mean(corloc_values)) if corloc_values else None,
    }
    if collect_detections:
        report["detections"] = all_dets
    return report


def write_detections(path: str, detections: list[tuple[str, Detection]]) -> None:
    """One JSON record per line: image_id, class_id, x1..y2, score."""
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, det in detections:
            fh.write(json.dumps(det.as_record(image_id), sort_keys=True))
            fh.write("\n")


def read_detections(path: str) -> list[tuple[str, Detection]]:
    out: list[tuple[str, Detection]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                det = Detection(
                    box=(rec["x1"], rec["y1"], rec["x2"], rec["y2"]),
                    class_id=int(rec["class_id"]),
                    score=float(rec["score"]),
                )
                out.append((rec["image_id"], det))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from None
    return out


def score_detection_file(
    detections: list[tuple[str, Detection]], images, num_classes: int
) -> dict:
    """Re-score a dumped detections file against a groundtruth dataset.

    CorLoc here uses each positive image's top-scoring dumped detection,
    which matches the live computation because NMS always keeps the
    top-scoring box of a class.
    """
    groundtruth = {
        image.image_id: [(tuple(box), int(cid)) for box, cid in image.groundtruth]
        for image in images
    }
    positives: dict[int, set[str]] = {c: set() for c in range(1, num_classes + 1)}
    for image in images:
        labels = np.asarray(image.label_vector).ravel()
        for c in range(1, num_classes + 1):
            if labels[c - 1] == 1:
                positives[c].add(image.image_id)

    per_class: dict[str, dict] = {}
    ap_values: list[float] = []
    corloc_values: list[float] = []
    for c in range(1, num_classes + 1):
        ap = average_precision(detections, groundtruth, c)
        best: dict[str, tuple | None] = {iid: None for iid in positives[c]}
        best_score: dict[str, float] = {}
        for image_id, det in detections:
            if det.class_id != c or image_id not in best:
                continue
            if image_id not in best_score or det.score > best_score[image_id]:
                best_score[image_id] = det.score
                best[image_id] = det.box
        cl = corloc(best, groundtruth, c)
        per_class[str(c)] = {"ap": ap, "corloc": cl}
        if ap is not None:
            ap_values.append(ap)
        if cl is not None:
            corloc_values.append(cl)
    return {
        "num_images": len(groundtruth),
        "num_classes": num_classes,
        "per_class": per_class,
        "map": float(np.mean(ap_values)) if ap_values else None,
        "mean_corloc": float(np.mean(corloc_values)) if corloc_values else None,
    }
