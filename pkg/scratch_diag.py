"""Scratch diagnostic for benchmark tuning (not part of the package)."""
import sys

import numpy as np

from pcldet.bench import benchmark_configs
from pcldet.clustering import find_centers_graph
from pcldet.datagen import generate_synthetic
from pcldet.geometry import iou_matrix
from pcldet.model import forward_all
from pcldet.trainer import TrainConfig, train


def stream_corloc(images, score_fn):
    hits, total = 0, 0
    for img in images:
        scores = score_fn(img)  # (C, R)
        labels = img.label_vector
        gt = img.groundtruth
        for c in range(labels.size):
            if labels[c] != 1:
                continue
            total += 1
            top = int(np.argmax(scores[c]))
            boxes = np.array([b for b, cid in gt if cid == c + 1])
            if iou_matrix(img.boxes[top].reshape(1, 4), boxes).max() > 0.5:
                hits += 1
    return hits / total


def center_quality(images, params, stream, cfg):
    good, total = 0, 0
    for img in images:
        fwd = forward_all(img.features, params)
        prev = fwd.basic_scores if stream == 1 else fwd.refined_scores[stream - 2]
        centers = find_centers_graph(
            prev, img.label_vector, img.boxes,
            graph_iou_threshold=cfg.graph_iou_threshold,
            kmeans_clusters=cfg.kmeans_clusters, max_centers=cfg.max_centers,
        )
        for ctr in centers:
            total += 1
            boxes = np.array([b for b, cid in img.groundtruth if cid == ctr.label])
            if boxes.size and iou_matrix(np.array(ctr.box).reshape(1, 4), boxes).max() > 0.5:
                good += 1
    return good / total


def main(seed, k, gen_overrides, train_overrides):
    gen_train, _ = benchmark_configs(seed, gen_overrides=gen_overrides)
    data = generate_synthetic(gen_train)
    cfg = TrainConfig(num_refinements=k, seed=seed, **(train_overrides or {}))
    res = train(data.training_view(), cfg)
    imgs = data.images

    protos_ideal = None
    # ideal ranker: true best-IoU per proposal (the feature signal w/o noise)
    def ideal(img):
        out = np.zeros((data.num_classes, img.boxes.shape[0]))
        for c in range(1, data.num_classes + 1):
            boxes = [b for b, cid in img.groundtruth if cid == c]
            if boxes:
                out[c - 1] = iou_matrix(img.boxes, np.array(boxes)).max(axis=1)
        return out

    print(f"seed={seed} K={k} ideal corloc: {stream_corloc(imgs, ideal):.3f}")

    def basic(img):
        return forward_all(img.features, res.params).basic_scores

    print(f"  basic-stream corloc: {stream_corloc(imgs, basic):.3f}")
    for s in range(1, k + 1):
        def refined(img, s=s):
            return forward_all(img.features, res.params).refined_scores[s - 1][:data.num_classes]
        print(f"  stream {s} corloc:    {stream_corloc(imgs, refined):.3f}  "
              f"center-quality into stream {s}: {center_quality(imgs, res.params, s, cfg):.3f}")


if __name__ == "__main__":
    gen_over = dict(
        jitter_ious=(0.5, 0.55, 0.65, 0.75, 0.85),
        parts_per_object=6,
        part_iou_low=0.15,
        part_iou_high=0.4,
        noise_level=float(sys.argv[2]) if len(sys.argv) > 2 else 0.25,
    )
    train_over = dict(lr_schedule=((2000, 0.03), (500, 0.003)))
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0, 3, gen_over, train_over)
