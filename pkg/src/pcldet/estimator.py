"""Scikit-learn style front end for the whole pipeline.

PCLDetector wraps dataset validation, training, and inference behind the
usual fit/predict surface so the detector composes with sklearn tooling
(get_params/set_params, clone, grid search over its hyperparameters).

X is a sequence of images; each image is either a TrainImage or a
(boxes, features) pair with boxes (R, 4) and features (R, D_raw). When
pairs are given, y must be an (n_images, C) 0/1 label matrix.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import TrainImage, validate_train_image
from .errors import DataError
from .geometry import Detection
from .metrics import class_score_matrix, detect
from .model import embed, forward_basic
from .trainer import TrainConfig, train

__all__ = ["PCLDetector"]


def _coerce_images(X, y) -> list[TrainImage]:
    if len(X) == 0:
        raise DataError("X must contain at least one image")
    if isinstance(X[0], TrainImage):
        return list(X)
    if y is None:
        raise DataError("y is required when X holds (boxes, features) pairs")
    labels = np.asarray(y, dtype=np.float64)
    if labels.ndim != 2 or labels.shape[0] != len(X):
        raise DataError("y must be an (n_images, n_classes) 0/1 matrix")
    images = []
    for i, (boxes, features) in enumerate(X):
        images.append(
            TrainImage(
                image_id=f"x_{i:05d}",
                width=float(np.asarray(boxes)[:, 2].max()),
                height=float(np.asarray(boxes)[:, 3].max()),
                boxes=np.asarray(boxes, dtype=np.float64),
                features=np.asarray(features, dtype=np.float64),
                label_vector=labels[i],
            )
        )
    return images


class PCLDetector(BaseEstimator):
    """Weakly supervised detector over fixed per-proposal features."""

    def __init__(
        self,
        num_refinements=3,
        center_method="graph",
        refine_loss="bag",
        graph_iou_threshold=0.4,
        cluster_iou_threshold=0.5,
        kmeans_clusters=3,
        max_centers=5,
        embed_dim=16,
        lr_schedule=((2000, 1e-3), (500, 1e-4)),
        momentum=0.9,
        weight_decay=0.0005,
        batch_size=2,
        seed=0,
        nms_threshold=0.3,
    ):
        self.num_refinements = num_refinements
        self.center_method = center_method
        self.refine_loss = refine_loss
        self.graph_iou_threshold = graph_iou_threshold
        self.cluster_iou_threshold = cluster_iou_threshold
        self.kmeans_clusters = kmeans_clusters
        self.max_centers = max_centers
        self.embed_dim = embed_dim
        self.lr_schedule = lr_schedule
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.seed = seed
        self.nms_threshold = nms_threshold

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            num_refinements=self.num_refinements,
            center_method=self.center_method,
            refine_loss=self.refine_loss,
            graph_iou_threshold=self.graph_iou_threshold,
            cluster_iou_threshold=self.cluster_iou_threshold,
            kmeans_clusters=self.kmeans_clusters,
            max_centers=self.max_centers,
            embed_dim=self.embed_dim,
            lr_schedule=tuple(tuple(seg) for seg in self.lr_schedule),
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            seed=self.seed,
        )

    def fit(self, X, y=None):
        images = _coerce_images(X, y)
        num_classes = np.asarray(images[0].label_vector).ravel().size
        for image in images:
            validate_train_image(image, num_classes)
        result = train(images, self._train_config())
        self.params_ = result.params
        self.train_log_ = result.log
        self.n_classes_ = num_classes
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("this PCLDetector instance is not fitted yet")

    def predict(self, X) -> list[list[Detection]]:
        """Per-image detections (per-class NMS applied)."""
        self._check_fitted()
        pairs = (
            [(img.boxes, img.features) for img in X]
            if len(X) and isinstance(X[0], TrainImage)
            else list(X)
        )
        return [
            detect(boxes, features, self.params_, self.nms_threshold)[0]
            for boxes, features in pairs
        ]

    def decision_function(self, X) -> np.ndarray:
        """(n_images, C) image-level scores from the pooled basic head."""
        self._check_fitted()
        pairs = (
            [(img.boxes, img.features) for img in X]
            if len(X) and isinstance(X[0], TrainImage)
            else list(X)
        )
        rows = []
        for _boxes, features in pairs:
            F = embed(np.asarray(features, dtype=np.float64), self.params_)
            _, image_scores = forward_basic(F, self.params_)
            rows.append(image_scores)
        return np.asarray(rows)

    def proposal_scores(self, boxes, features) -> np.ndarray:
        """(C, R) detection-time class scores for one image."""
        self._check_fitted()
        scores, _ = class_score_matrix(features, self.params_)
        return scores
