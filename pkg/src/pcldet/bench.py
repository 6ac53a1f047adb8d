"""Reusable synthetic-benchmark harness for ablation experiments.

One trial = generate a seed-controlled train/test split, train one
configuration, then report CorLoc on the training images and mAP on the
held-out images. Used by the acceptance suite and handy for sweeps.
"""

from __future__ import annotations

from dataclasses import replace

from .datagen import GenConfig, generate_synthetic
from .metrics import evaluate
from .trainer import TrainConfig, train

TEST_SEED_OFFSET = 10_000

# hotter than the library default: the desk-scale model trains from scratch,
# so the benchmark uses a faster schedule with the same two-phase shape
BENCH_SCHEDULE = ((2500, 0.03), (1500, 0.003))

__all__ = ["BENCH_SCHEDULE", "benchmark_configs", "run_trial"]


def benchmark_configs(
    seed: int,
    *,
    train_images: int = 100,
    test_images: int = 150,
    gen_overrides: dict | None = None,
) -> tuple[GenConfig, GenConfig]:
    base = GenConfig(seed=seed, num_images=train_images, **(gen_overrides or {}))
    test = replace(base, seed=seed + TEST_SEED_OFFSET, num_images=test_images)
    return base, test


def run_trial(
    seed: int,
    *,
    num_refinements: int = 3,
    center_method: str = "graph",
    refine_loss: str = "bag",
    train_images: int = 100,
    test_images: int = 150,
    gen_overrides: dict | None = None,
    train_overrides: dict | None = None,
) -> dict:
    """Train one configuration on the seeded benchmark; returns summary metrics."""
    gen_train, gen_test = benchmark_configs(
        seed,
        train_images=train_images,
        test_images=test_images,
        gen_overrides=gen_overrides,
    )
    train_set = generate_synthetic(gen_train)
    test_set = generate_synthetic(gen_test)

    config = TrainConfig(
        num_refinements=num_refinements,
        center_method=center_method,
        refine_loss=refine_loss,
        seed=seed,
        **{"lr_schedule": BENCH_SCHEDULE, **(train_overrides or {})},
    )
    result = train(train_set.training_view(), config)

    train_report = evaluate(train_set.images, result.params)
    test_report = evaluate(test_set.images, result.params)
    return {
        "seed": seed,
        "num_refinements": num_refinements,
        "center_method": center_method,
        "refine_loss": refine_loss,
        "corloc": train_report["mean_corloc"],
        "map": test_report["map"],
        "train_report": train_report,
        "test_report": test_report,
    }
