"""Deterministic synthetic detection benchmark and its JSONL file format.

Every image plants a few objects, then emits proposals around them:
jittered near-copies at exact graded IoU levels (at least one above 0.5,
so every object is coverable), sub-boxes covering only parts of objects,
and random background boxes.

Features couple to geometry along two orthogonal directions per class.
The whole-object direction is scaled by the proposal's best IoU with any
object of the class. The part-content direction is scaled by how purely
the proposal covers an object's designated discriminative sub-region
(full strength for a tight box on the region, diluted by area for boxes
much larger than it). Tight part boxes therefore carry the strongest
class evidence even though they localize badly, which is exactly the
failure mode an image-level objective falls into and cluster refinement
has to fix. With part_signal_scale=0 the part direction vanishes and a
feature is just the class prototype scaled by best IoU plus noise.

Prototypes are derived from `class_signature_seed`, not the per-dataset
seed, so separately generated train/test splits share a feature space.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import TrainImage
from .errors import ConfigError, DatasetFormatError, GenerationError
from .geometry import iou_matrix, validate_boxes

DATASET_SCHEMA = "pcldet-dataset"
DATASET_VERSION = 1

__all__ = [
    "GenConfig",
    "SyntheticImage",
    "DatasetManifest",
    "class_prototypes",
    "generate_synthetic",
    "save_dataset",
    "load_dataset",
]


@dataclass(frozen=True)
class GenConfig:
    num_images: int = 100
    num_classes: int = 4
    proposals_per_image: int = 48
    feature_dim: int = 16
    seed: int = 0
    objects_min: int = 1
    objects_max: int = 3
    canvas_width: float = 100.0
    canvas_height: float = 100.0
    object_min_size: float = 18.0
    object_max_size: float = 36.0
    jitter_ious: tuple[float, ...] = (0.45, 0.5, 0.55, 0.6, 0.65, 0.7, 0.8, 0.9)
    parts_per_object: int = 4
    part_iou_low: float = 0.15
    part_iou_high: float = 0.45
    noise_level: float = 0.2
    prototype_scale: float = 1.0
    part_signal_scale: float = 1.5
    part_region_fraction: float = 0.35
    part_dilution_exponent: float = 0.55
    object_variation: float = 0.3
    class_signature_seed: int = 90125

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.proposals_per_image < 20:
            raise ConfigError("proposals_per_image must be >= 20")
        if self.num_images < 0:
            raise ConfigError("num_images must be >= 0")
        if not 1 <= self.objects_min <= self.objects_max:
            raise ConfigError("need 1 <= objects_min <= objects_max")
        if not self.jitter_ious or any(not 0.0 < t < 1.0 for t in self.jitter_ious):
            raise ConfigError("jitter_ious must be IoU targets in (0, 1)")
        if max(self.jitter_ious) <= 0.5:
            raise ConfigError("jitter_ious needs a grade above 0.5 to cover objects")
        if not 0.0 < self.part_iou_low <= self.part_iou_high < 0.5:
            raise ConfigError("part IoU band must satisfy 0 < low <= high < 0.5")
        per_object = len(self.jitter_ious) + self.parts_per_object
        if self.objects_max * per_object >= self.proposals_per_image:
            raise ConfigError(
                "proposals_per_image too small for objects_max with the "
                "configured jitters and parts (no room for background boxes)"
            )
        if self.noise_level < 0:
            raise ConfigError("noise_level must be >= 0")
        if self.part_signal_scale < 0:
            raise ConfigError("part_signal_scale must be >= 0")
        if self.object_variation < 0:
            raise ConfigError("object_variation must be >= 0")
        if not 0.05 <= self.part_region_fraction <= 0.6:
            raise ConfigError("part_region_fraction must lie in [0.05, 0.6]")
        directions = self.num_classes * (2 if self.part_signal_scale > 0 else 1)
        if self.feature_dim < directions:
            raise ConfigError(
                f"feature_dim must be >= {directions} (one orthogonal direction "
                "per class signal)"
            )

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["jitter_ious"] = list(self.jitter_ious)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "GenConfig":
        doc = dict(doc)
        doc["jitter_ious"] = tuple(doc["jitter_ious"])
        return cls(**doc)


@dataclass(frozen=True)
class SyntheticImage:
    image_id: str
    width: float
    height: float
    boxes: np.ndarray  # (R, 4) proposals
    features: np.ndarray  # (R, D_raw)
    label_vector: np.ndarray  # (C,)
    groundtruth: tuple[tuple[np.ndarray, int], ...]  # ((4,) box, class_id 1..C)

    def train_view(self) -> TrainImage:
        return TrainImage(
            image_id=self.image_id,
            width=self.width,
            height=self.height,
            boxes=self.boxes,
            features=self.features,
            label_vector=self.label_vector,
        )


@dataclass
class DatasetManifest:
    config: GenConfig
    images: list[SyntheticImage] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def training_view(self) -> list[TrainImage]:
        """Groundtruth-free view handed to the trainer."""
        return [image.train_view() for image in self.images]


def _signal_directions(config: GenConfig) -> np.ndarray:
    """(2C, D_raw) orthonormal rows: whole-object directions first, then the
    part-content directions. Shared by all datasets with the same signature
    seed, class count, and feature dim; orthogonality keeps class and part
    signals from leaking into each other."""
    rng = np.random.default_rng(config.class_signature_seed)
    raw = rng.standard_normal((config.feature_dim, 2 * config.num_classes))
    q, _ = np.linalg.qr(raw)
    return q.T


def class_prototypes(config: GenConfig) -> np.ndarray:
    """(C, D_raw) whole-object feature directions (scaled); a probe matrix
    whose responses track each proposal's best overlap with class objects."""
    return _signal_directions(config)[: config.num_classes] * config.prototype_scale


def _jitter_box(box: np.ndarray, target_iou: float, rng: np.random.Generator) -> np.ndarray:
    """A box at an exact IoU with `box`: an axis shift or a centered rescale."""
    x1, y1, x2, y2 = box
    w, h = x2 - x1, y2 - y1
    variant = int(rng.integers(0, 6))
    if variant < 4:  # shift along one axis; IoU = (L - d) / (L + d)
        axis_len = w if variant < 2 else h
        d = axis_len * (1.0 - target_iou) / (1.0 + target_iou)
        sign = 1.0 if variant % 2 == 0 else -1.0
        dx, dy = (sign * d, 0.0) if variant < 2 else (0.0, sign * d)
        return np.array([x1 + dx, y1 + dy, x2 + dx, y2 + dy])
    cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
    # centered rescale: grow gives IoU 1/s^2, shrink gives s^2
    s = 1.0 / np.sqrt(target_iou) if variant == 4 else np.sqrt(target_iou)
    return np.array([cx - s * w / 2, cy - s * h / 2, cx + s * w / 2, cy + s * h / 2])


def _part_box(
    box: np.ndarray, config: GenConfig, rng: np.random.Generator, corner: int
) -> np.ndarray:
    """A contained sub-box; IoU with the parent equals its area fraction.

    Parts are anchored to rotating corners so different parts of one object
    stay largely disjoint from each other, like distinct object parts.
    """
    x1, y1, x2, y2 = box
    w, h = x2 - x1, y2 - y1
    frac = rng.uniform(config.part_iou_low, config.part_iou_high)
    root = np.sqrt(frac)
    lo, hi = max(root, 0.75), min(1.0 / root, 1.3333)
    stretch = rng.uniform(lo, hi) if lo < hi else 1.0
    pw, ph = w * root * stretch, h * root / stretch
    slack_x, slack_y = w - pw, h - ph
    # corner anchoring with a little jitter inward
    fx = rng.uniform(0.0, 0.25) if corner % 2 == 0 else rng.uniform(0.75, 1.0)
    fy = rng.uniform(0.0, 0.25) if corner // 2 == 0 else rng.uniform(0.75, 1.0)
    px = x1 + fx * slack_x
    py = y1 + fy * slack_y
    return np.array([px, py, px + pw, py + ph])


def _background_box(config: GenConfig, rng: np.random.Generator) -> np.ndarray:
    w = rng.uniform(8.0, 0.4 * config.canvas_width)
    h = rng.uniform(8.0, 0.4 * config.canvas_height)
    x = rng.uniform(0.0, config.canvas_width - w)
    y = rng.uniform(0.0, config.canvas_height - h)
    return np.array([x, y, x + w, y + h])


@dataclass(frozen=True)
class _PlantedObject:
    box: np.ndarray
    class_id: int
    part_region: np.ndarray  # discriminative sub-box
    part_corner: int  # which corner the region is anchored at


def _part_region(box: np.ndarray, fraction: float, corner: int) -> np.ndarray:
    x1, y1, x2, y2 = box
    w, h = x2 - x1, y2 - y1
    pw, ph = w * np.sqrt(fraction), h * np.sqrt(fraction)
    px = x1 if corner % 2 == 0 else x2 - pw
    py = y1 if corner // 2 == 0 else y2 - ph
    return np.array([px, py, px + pw, py + ph])


def _place_objects(config: GenConfig, rng: np.random.Generator) -> list[_PlantedObject]:
    count = int(rng.integers(config.objects_min, config.objects_max + 1))
    margin = 0.4 * config.object_max_size  # room for grown/shifted jitters
    objects: list[_PlantedObject] = []
    for _ in range(count):
        placed = False
        for _attempt in range(200):
            w = rng.uniform(config.object_min_size, config.object_max_size)
            h = rng.uniform(config.object_min_size, config.object_max_size)
            x = rng.uniform(margin, config.canvas_width - margin - w)
            y = rng.uniform(margin, config.canvas_height - margin - h)
            box = np.array([x, y, x + w, y + h])
            if all(
                iou_matrix(box.reshape(1, 4), other.box.reshape(1, 4))[0, 0] < 0.3
                for other in objects
            ):
                cls = int(rng.integers(1, config.num_classes + 1))
                corner = int(rng.integers(0, 4))
                objects.append(
                    _PlantedObject(
                        box=box,
                        class_id=cls,
                        part_region=_part_region(
                            box, config.part_region_fraction, corner
                        ),
                        part_corner=corner,
                    )
                )
                placed = True
                break
        if not placed:
            raise GenerationError("could not place objects without heavy overlap")
    return objects


def _part_content(boxes: np.ndarray, region: np.ndarray, dilution: float) -> np.ndarray:
    """Per-box part-content signal: coverage of the region, diluted for boxes
    much larger than it (coverage * purity^dilution).

    A tight box on the region scores 1; a whole-object box contains the
    region but mixes it with context, so its signal shrinks mildly; a box
    elsewhere scores 0.
    """
    ix1 = np.maximum(boxes[:, 0], region[0])
    iy1 = np.maximum(boxes[:, 1], region[1])
    ix2 = np.minimum(boxes[:, 2], region[2])
    iy2 = np.minimum(boxes[:, 3], region[3])
    inter = np.clip(ix2 - ix1, 0.0, None) * np.clip(iy2 - iy1, 0.0, None)
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    region_area = (region[2] - region[0]) * (region[3] - region[1])
    coverage = inter / region_area
    purity = inter / areas
    return coverage * purity**dilution


def _make_image(
    config: GenConfig, directions: np.ndarray, index: int, rng: np.random.Generator
) -> SyntheticImage:
    objects = _place_objects(config, rng)
    proposals: list[np.ndarray] = []
    for obj in objects:
        for target in config.jitter_ious:
            proposals.append(_jitter_box(obj.box, target, rng))
        for p in range(config.parts_per_object):
            # half the parts sit on the discriminative region, the rest on
            # other corners of the object
            if p % 2 == 0:
                corner = obj.part_corner
            else:
                corner = (obj.part_corner + 1 + p // 2) % 4
            proposals.append(_part_box(obj.box, config, rng, corner=corner))
    while len(proposals) < config.proposals_per_image:
        proposals.append(_background_box(config, rng))
    boxes = validate_boxes(np.array(proposals))

    features = config.noise_level * rng.standard_normal(
        (config.proposals_per_image, config.feature_dim)
    )
    labels = np.zeros(config.num_classes)
    num_classes = config.num_classes
    for cls in range(1, num_classes + 1):
        cls_objects = [obj for obj in objects if obj.class_id == cls]
        if not cls_objects:
            continue
        labels[cls - 1] = 1.0
        overlap = iou_matrix(boxes, np.array([o.box for o in cls_objects])).max(axis=1)
        features += (
            overlap[:, None] * directions[cls - 1] * config.prototype_scale
        )
        if config.part_signal_scale > 0:
            content = np.max(
                [
                    _part_content(
                        boxes, o.part_region, config.part_dilution_exponent
                    )
                    for o in cls_objects
                ],
                axis=0,
            )
            features += (
                content[:, None]
                * directions[num_classes + cls - 1]
                * config.part_signal_scale
            )

    if config.object_variation > 0:
        # per-instance appearance variation, orthogonal to every class signal
        for obj in objects:
            raw_dir = rng.standard_normal(config.feature_dim)
            raw_dir -= directions.T @ (directions @ raw_dir)
            norm = np.linalg.norm(raw_dir)
            if norm < 1e-9:
                continue
            overlap = iou_matrix(boxes, obj.box.reshape(1, 4))[:, 0]
            features += (
                overlap[:, None] * (raw_dir / norm) * config.object_variation
            )

    overlaps = iou_matrix(boxes, np.array([o.box for o in objects]))
    if not np.all(overlaps.max(axis=0) > 0.5):
        raise GenerationError(f"image {index}: an object has no proposal above IoU 0.5")

    return SyntheticImage(
        image_id=f"img_{index:05d}",
        width=config.canvas_width,
        height=config.canvas_height,
        boxes=boxes,
        features=features,
        label_vector=labels,
        groundtruth=tuple((obj.box, obj.class_id) for obj in objects),
    )


def generate_synthetic(config: GenConfig) -> DatasetManifest:
    """Deterministic dataset for the given config (all randomness from its seed)."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    directions = _signal_directions(config)
    images = [
        _make_image(config, directions, i, rng) for i in range(config.num_images)
    ]
    return DatasetManifest(config=config, images=images)


# ---------------------------------------------------------------------------
# file format: one header line, then one JSON object per image
# ---------------------------------------------------------------------------


def save_dataset(manifest: DatasetManifest, path: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        header = {
            "schema": DATASET_SCHEMA,
            "version": DATASET_VERSION,
            "seed": manifest.config.seed,
            "num_classes": manifest.config.num_classes,
            "feature_dim": manifest.config.feature_dim,
            "config": manifest.config.to_dict(),
        }
        fh.write(json.dumps(header, sort_keys=True))
        fh.write("\n")
        for image in manifest.images:
            record = {
                "image_id": image.image_id,
                "width": image.width,
                "height": image.height,
                "labels": [
                    c + 1 for c in range(manifest.num_classes)
                    if image.label_vector[c] == 1
                ],
                "proposals": image.boxes.tolist(),
                "features": image.features.tolist(),
                "groundtruth": [
                    {"box": np.asarray(box).tolist(), "class_id": cls}
                    for box, cls in image.groundtruth
                ],
            }
            fh.write(json.dumps(record, sort_keys=True))
            fh.write("\n")
    os.replace(tmp, path)


def load_dataset(path: str) -> DatasetManifest:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: line 1: empty file, header expected")

    def parse(lineno: int, text: str) -> dict:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from None
        if not isinstance(doc, dict):
            raise DatasetFormatError(f"{path}: line {lineno}: expected a JSON object")
        return doc

    header = parse(1, lines[0])
    if header.get("schema") != DATASET_SCHEMA:
        raise DatasetFormatError(
            f"{path}: line 1: unsupported schema {header.get('schema')!r}"
        )
    if header.get("version") != DATASET_VERSION:
        raise DatasetFormatError(
            f"{path}: line 1: unsupported version {header.get('version')!r} "
            f"(supported: {DATASET_VERSION})"
        )
    try:
        config = GenConfig.from_dict(header["config"])
    except (KeyError, TypeError) as exc:
        raise DatasetFormatError(f"{path}: line 1: bad config: {exc}") from None

    images: list[SyntheticImage] = []
    for lineno, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        rec = parse(lineno, text)
        try:
            labels = np.zeros(config.num_classes)
            for cls in rec["labels"]:
                labels[int(cls) - 1] = 1.0
            images.append(
                SyntheticImage(
                    image_id=rec["image_id"],
                    width=float(rec["width"]),
                    height=float(rec["height"]),
                    boxes=np.asarray(rec["proposals"], dtype=np.float64),
                    features=np.asarray(rec["features"], dtype=np.float64),
                    label_vector=labels,
                    groundtruth=tuple(
                        (np.asarray(g["box"], dtype=np.float64), int(g["class_id"]))
                        for g in rec["groundtruth"]
                    ),
                )
            )
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from None
    return DatasetManifest(config=config, images=images)
