"""Batch command-line surface: gen / train / eval / clusters / score.

Every command is deterministic given its flags and writes its resolved
configuration next to its outputs. Exit codes: 0 success, 1 usage error,
2 data or configuration error. Diagnostics go to stderr; reports go to
stdout only when no output path is given.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .clustering import build_supervision, clusters_to_record
from .errors import ConfigError, DataError, DatasetFormatError, GenerationError
from .datagen import GenConfig, generate_synthetic, load_dataset, save_dataset
from .metrics import evaluate, read_detections, score_detection_file, write_detections
from .model import forward_all, load_params, save_params
from .trainer import TrainConfig, train, write_log_csv

OUTDIR_ENV = "PCLDET_OUTDIR"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def _info(message: str) -> None:
    print(message, file=sys.stderr)


def _write_json(doc: dict, path: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")
    os.replace(tmp, path)


def _resolve_out(path: str | None, default_name: str | None = None) -> str | None:
    if path is not None:
        return path
    base = os.environ.get(OUTDIR_ENV)
    if base and default_name:
        return os.path.join(base, default_name)
    return None


def _parse_schedule(text: str) -> tuple[tuple[int, float], ...]:
    try:
        segments = []
        for part in text.split(","):
            n, lr = part.split(":")
            segments.append((int(n), float(lr)))
        return tuple(segments)
    except ValueError:
        raise ConfigError(
            f"bad schedule {text!r}; expected e.g. '2000:0.001,500:0.0001'"
        ) from None


def _run_config_path(out_path: str) -> str:
    return out_path + ".run.json"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    out = _resolve_out(args.output, "dataset.jsonl")
    if out is None:
        raise ConfigError("gen needs -o/--output (or PCLDET_OUTDIR)")
    config = GenConfig(
        num_images=args.images,
        num_classes=args.classes,
        proposals_per_image=args.proposals,
        feature_dim=args.feature_dim,
        noise_level=args.noise,
        seed=args.seed,
    )
    manifest = generate_synthetic(config)
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    save_dataset(manifest, out)
    _write_json({"command": "gen", "config": config.to_dict(), "output": out},
                _run_config_path(out))
    _info(f"wrote {len(manifest.images)} images to {out}")
    return 0


def cmd_train(args) -> int:
    outdir = _resolve_out(args.output, "run")
    if outdir is None:
        raise ConfigError("train needs -o/--output (or PCLDET_OUTDIR)")
    manifest = load_dataset(args.data)
    config = TrainConfig(
        num_refinements=args.k,
        center_method=args.center_method,
        refine_loss=args.refine_loss,
        graph_iou_threshold=args.graph_iou,
        cluster_iou_threshold=args.cluster_iou,
        kmeans_clusters=args.kmeans_clusters,
        max_centers=args.max_centers,
        embed_dim=args.embed_dim,
        lr_schedule=_parse_schedule(args.schedule),
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        seed=args.seed,
        supervision_refresh=args.supervision_refresh,
    )
    config.validate()
    result = train(manifest.training_view(), config)

    os.makedirs(outdir, exist_ok=True)
    save_params(
        result.params,
        os.path.join(outdir, "checkpoint.json"),
        extra={
            "num_classes": manifest.num_classes,
            "raw_dim": manifest.feature_dim,
            "train_config": config.to_dict(),
            "dataset_seed": manifest.config.seed,
        },
    )
    write_log_csv(
        result.log, os.path.join(outdir, "train_log.csv"), config.num_refinements + 1
    )
    _write_json(
        {"command": "train", "data": args.data, "config": config.to_dict()},
        os.path.join(outdir, "run_config.json"),
    )
    _info(
        f"trained {len(result.log)} iterations; final loss "
        f"{result.log[-1]['loss_total']:.4f}; outputs in {outdir}"
    )
    return 0


def _load_checkpoint_for(args, manifest):
    params, extra = load_params(args.checkpoint)
    if extra:
        if extra.get("num_classes") != manifest.num_classes:
            raise ConfigError(
                f"checkpoint has {extra.get('num_classes')} classes but dataset "
                f"has {manifest.num_classes}"
            )
        if extra.get("raw_dim") != manifest.feature_dim:
            raise ConfigError(
                f"checkpoint raw feature dim {extra.get('raw_dim')} does not "
                f"match dataset feature dim {manifest.feature_dim}"
            )
    return params, extra


def cmd_eval(args) -> int:
    manifest = load_dataset(args.data)
    params, _ = _load_checkpoint_for(args, manifest)
    report = evaluate(
        manifest.images,
        params,
        nms_threshold=args.nms,
        collect_detections=args.dump_dets is not None,
    )
    detections = report.pop("detections", None)
    if args.dump_dets is not None:
        write_detections(args.dump_dets, detections)
        _info(f"dumped {len(detections)} detections to {args.dump_dets}")
    out = _resolve_out(args.output, None)
    resolved = {
        "command": "eval",
        "checkpoint": args.checkpoint,
        "data": args.data,
        "nms_threshold": args.nms,
        "dump_dets": args.dump_dets,
    }
    if out is not None:
        _write_json(report, out)
        _write_json(resolved, _run_config_path(out))
        _info(f"wrote metrics report to {out}")
    else:
        json.dump(report, sys.stdout, sort_keys=True, indent=2)
        sys.stdout.write("\n")
    return 0


def cmd_clusters(args) -> int:
    manifest = load_dataset(args.data)
    params, extra = _load_checkpoint_for(args, manifest)
    k = args.stream
    if not 1 <= k <= max(params.num_refinements, 1):
        raise _UsageError(
            f"--stream must lie in 1..{max(params.num_refinements, 1)}, got {k}"
        )
    train_cfg = extra.get("train_config", {})
    records = []
    for image in manifest.training_view():
        fwd = forward_all(image.features, params)
        prev = fwd.basic_scores if k == 1 else fwd.refined_scores[k - 2]
        _, clusters = build_supervision(
            prev,
            image.label_vector,
            image.boxes,
            center_method=train_cfg.get("center_method", "graph"),
            refine_loss=train_cfg.get("refine_loss", "bag"),
            graph_iou_threshold=train_cfg.get("graph_iou_threshold", 0.4),
            cluster_iou_threshold=train_cfg.get("cluster_iou_threshold", 0.5),
            kmeans_clusters=train_cfg.get("kmeans_clusters", 3),
            max_centers=train_cfg.get("max_centers", 5),
        )
        records.append(clusters_to_record(image.image_id, k, clusters))
    doc = {"stream": k, "checkpoint": args.checkpoint, "images": records}
    out = _resolve_out(args.output, None)
    if out is not None:
        _write_json(doc, out)
        _write_json(
            {"command": "clusters", "checkpoint": args.checkpoint,
             "data": args.data, "stream": k},
            _run_config_path(out),
        )
        _info(f"wrote cluster dump for {len(records)} images to {out}")
    else:
        json.dump(doc, sys.stdout, sort_keys=True, indent=2)
        sys.stdout.write("\n")
    return 0


def cmd_score(args) -> int:
    manifest = load_dataset(args.data)
    detections = read_detections(args.dets)
    report = score_detection_file(detections, manifest.images, manifest.num_classes)
    out = _resolve_out(args.output, None)
    if out is not None:
        _write_json(report, out)
        _write_json(
            {"command": "score", "dets": args.dets, "data": args.data},
            _run_config_path(out),
        )
        _info(f"wrote metrics report to {out}")
    else:
        json.dump(report, sys.stdout, sort_keys=True, indent=2)
        sys.stdout.write("\n")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="pcldet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--images", type=int, default=100)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--proposals", type=int, default=40)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--noise", type=float, default=GenConfig.noise_level)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a detector on a dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=3, help="number of refinement streams")
    p.add_argument("--center-method", choices=("highest", "graph"), default="graph")
    p.add_argument(
        "--refine-loss",
        choices=("assigned", "assigned_weighted", "bag"),
        default="bag",
    )
    p.add_argument("--graph-iou", type=float, default=0.4)
    p.add_argument("--cluster-iou", type=float, default=0.5)
    p.add_argument("--kmeans-clusters", type=int, default=3)
    p.add_argument("--max-centers", type=int, default=5)
    p.add_argument("--embed-dim", type=int, default=16)
    p.add_argument("--schedule", default="2000:0.001,500:0.0001")
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=0.0005)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--supervision-refresh", type=int, default=1)
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--nms", type=float, default=0.3)
    p.add_argument("--dump-dets", default=None, help="also write detections JSONL")
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("clusters", help="dump proposal clusters at a stream")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--stream", type=int, required=True)
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=cmd_clusters)

    p = sub.add_parser("score", help="score a dumped detections file")
    p.add_argument("--dets", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=cmd_score)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, DataError, DatasetFormatError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
