"""Training loop: per-iteration supervision generation, losses, SGD updates.

One iteration processes a batch of images: every stream runs forward, each
refinement stream's supervision is rebuilt from the preceding stream's
scores of the same forward pass, the composite loss is backpropagated, the
per-image gradients are averaged, and one momentum-SGD step is applied
(weight decay on weight matrices only, never biases).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .clustering import build_supervision
from .data import TrainImage, validate_train_image
from .errors import ConfigError
from .losses import total_loss
from .model import ModelParams, forward_all, init_params

__all__ = [
    "TrainConfig",
    "TrainState",
    "TrainResult",
    "IterationReport",
    "lr_at",
    "total_iterations",
    "sgd_step",
    "train_iteration",
    "train",
    "write_log_csv",
]

CENTER_METHODS = ("highest", "graph")
REFINE_LOSSES = ("assigned", "assigned_weighted", "bag")


@dataclass(frozen=True)
class TrainConfig:
    num_refinements: int = 3
    center_method: str = "graph"
    refine_loss: str = "bag"
    graph_iou_threshold: float = 0.4
    cluster_iou_threshold: float = 0.5
    kmeans_clusters: int = 3
    max_centers: int = 5
    embed_dim: int = 16
    lr_schedule: tuple[tuple[int, float], ...] = ((2000, 1e-3), (500, 1e-4))
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 2
    seed: int = 0
    init_std: float = 0.01
    # 1 regenerates supervisions every iteration (online training); larger
    # values hold them fixed in between (alternating-style training).
    supervision_refresh: int = 1

    def validate(self) -> None:
        if self.num_refinements < 0:
            raise ConfigError("num_refinements must be >= 0")
        if self.center_method not in CENTER_METHODS:
            raise ConfigError(f"center_method must be one of {CENTER_METHODS}")
        if self.refine_loss not in REFINE_LOSSES:
            raise ConfigError(f"refine_loss must be one of {REFINE_LOSSES}")
        for name, value in (
            ("graph_iou_threshold", self.graph_iou_threshold),
            ("cluster_iou_threshold", self.cluster_iou_threshold),
        ):
            if not 0.0 < value < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if self.kmeans_clusters < 1 or self.max_centers < 1:
            raise ConfigError("kmeans_clusters and max_centers must be >= 1")
        if self.embed_dim < 1 or self.batch_size < 1:
            raise ConfigError("embed_dim and batch_size must be >= 1")
        if not self.lr_schedule or any(n < 0 or lr < 0 for n, lr in self.lr_schedule):
            raise ConfigError("lr_schedule must be non-empty with n >= 0, lr >= 0")
        if self.supervision_refresh < 1:
            raise ConfigError("supervision_refresh must be >= 1")

    def to_dict(self) -> dict:
        return {
            "num_refinements": self.num_refinements,
            "center_method": self.center_method,
            "refine_loss": self.refine_loss,
            "graph_iou_threshold": self.graph_iou_threshold,
            "cluster_iou_threshold": self.cluster_iou_threshold,
            "kmeans_clusters": self.kmeans_clusters,
            "max_centers": self.max_centers,
            "embed_dim": self.embed_dim,
            "lr_schedule": [list(seg) for seg in self.lr_schedule],
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "init_std": self.init_std,
            "supervision_refresh": self.supervision_refresh,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        cfg = cls(**{**doc, "lr_schedule": tuple((int(n), float(lr)) for n, lr in doc["lr_schedule"])})
        cfg.validate()
        return cfg


def total_iterations(config: TrainConfig) -> int:
    return sum(n for n, _ in config.lr_schedule)


def lr_at(config: TrainConfig, iteration: int) -> float:
    """Learning rate for a 0-based iteration index under the piecewise schedule."""
    start = 0
    for length, lr in config.lr_schedule:
        if iteration < start + length:
            return lr
        start += length
    return config.lr_schedule[-1][1]


@dataclass
class TrainState:
    params: ModelParams
    velocity: ModelParams
    iteration: int
    rng: np.random.Generator
    supervision_builds: int = 0
    # only used with supervision_refresh > 1
    cached_supervisions: dict = field(default_factory=dict)


@dataclass
class TrainResult:
    params: ModelParams
    log: list[dict]
    state: TrainState


@dataclass
class IterationReport:
    total: float
    per_stream: list[float]
    grads: ModelParams
    lr: float
    mean_num_centers: float


def sgd_step(
    params: ModelParams,
    velocity: ModelParams,
    grads: ModelParams,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """In-place momentum update; decay applies to w_* arrays only."""
    for (name, p), (_, v), (_, g) in zip(
        params.named_arrays(), velocity.named_arrays(), grads.named_arrays()
    ):
        decay = weight_decay if name.startswith("w_") else 0.0
        v *= momentum
        v -= lr * (g + decay * p)
        p += v


def _image_supervisions(image: TrainImage, fwd, config: TrainConfig):
    """Supervisions for streams 1..K from the current forward pass."""
    sups = []
    center_counts = []
    for k in range(1, config.num_refinements + 1):
        prev = fwd.basic_scores if k == 1 else fwd.refined_scores[k - 2]
        sup, clusters = build_supervision(
            prev,
            image.label_vector,
            image.boxes,
            center_method=config.center_method,
            refine_loss=config.refine_loss,
            graph_iou_threshold=config.graph_iou_threshold,
            cluster_iou_threshold=config.cluster_iou_threshold,
            kmeans_clusters=config.kmeans_clusters,
            max_centers=config.max_centers,
        )
        sups.append(sup)
        center_counts.append(len(clusters.objects))
    return sups, center_counts


def train_iteration(
    batch: list[TrainImage], state: TrainState, config: TrainConfig
) -> IterationReport:
    """One SGD iteration over a batch; gradients are averaged over images."""
    if not batch:
        raise ConfigError("empty batch")
    lr = lr_at(config, state.iteration)
    num_streams = config.num_refinements + 1

    grad_sum = state.params.zeros_like()
    stream_sums = np.zeros(num_streams)
    center_count_sum = 0.0
    center_count_n = 0
    refresh = (
        config.supervision_refresh == 1
        or state.iteration % config.supervision_refresh == 0
    )
    for image in batch:
        fwd = forward_all(image.features, state.params)
        sups: list = []
        counts: list = []
        if config.num_refinements > 0:
            cached = state.cached_supervisions.get(image.image_id)
            if refresh or cached is None:
                sups, counts = _image_supervisions(image, fwd, config)
                state.supervision_builds += len(sups)
                if config.supervision_refresh > 1:
                    state.cached_supervisions[image.image_id] = (sups, counts)
            else:
                sups, counts = cached
            center_count_sum += sum(counts)
            center_count_n += len(counts)
        report = total_loss(fwd, state.params, image.label_vector, sups)
        stream_sums += np.asarray(report.per_stream)
        for (_, g_sum), (_, g) in zip(grad_sum.named_arrays(), report.grads.named_arrays()):
            g_sum += g

    scale = 1.0 / len(batch)
    for _, g_sum in grad_sum.named_arrays():
        g_sum *= scale
    stream_means = stream_sums * scale

    sgd_step(state.params, state.velocity, grad_sum, lr, config.momentum, config.weight_decay)
    state.iteration += 1
    return IterationReport(
        total=float(stream_means.sum()),
        per_stream=[float(v) for v in stream_means],
        grads=grad_sum,
        lr=lr,
        mean_num_centers=center_count_sum / center_count_n if center_count_n else 0.0,
    )


def train(images: list[TrainImage], config: TrainConfig) -> TrainResult:
    """Run the full schedule over shuffled epochs of the dataset."""
    config.validate()
    if not images:
        raise ConfigError("training dataset is empty")
    num_classes = np.asarray(images[0].label_vector).ravel().size
    raw_dim = np.asarray(images[0].features).shape[1]
    for image in images:
        validate_train_image(image, num_classes)

    rng = np.random.default_rng(config.seed)
    params = init_params(
        raw_dim,
        config.embed_dim,
        num_classes,
        config.num_refinements,
        rng,
        config.init_std,
    )
    state = TrainState(
        params=params, velocity=params.zeros_like(), iteration=0, rng=rng
    )

    log: list[dict] = []
    queue: list[int] = []
    n_iters = total_iterations(config)
    while state.iteration < n_iters:
        while len(queue) < config.batch_size:
            queue.extend(int(i) for i in state.rng.permutation(len(images)))
        batch = [images[i] for i in queue[: config.batch_size]]
        del queue[: config.batch_size]
        report = train_iteration(batch, state, config)
        if not np.isfinite(report.total):
            raise ConfigError(
                f"loss diverged at iteration {state.iteration - 1}: {report.total}"
            )
        row = {
            "iteration": state.iteration - 1,
            "lr": report.lr,
            "loss_total": report.total,
            "mean_num_centers": report.mean_num_centers,
        }
        for k, v in enumerate(report.per_stream):
            row[f"loss_stream_{k}"] = v
        log.append(row)
    return TrainResult(params=state.params, log=log, state=state)


def write_log_csv(log: list[dict], path: str, num_streams: int) -> None:
    columns = (
        ["iteration", "lr", "loss_total"]
        + [f"loss_stream_{k}" for k in range(num_streams)]
        + ["mean_num_centers"]
    )
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in log:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])
