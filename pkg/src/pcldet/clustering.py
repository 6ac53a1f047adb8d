"""Proposal-cluster construction and the supervisions derived from it.

Given the previous stream's score matrix and the image labels, this module
finds cluster centers (either the single highest-scoring proposal per
positive class, or a greedy max-degree walk over a graph of top-ranking
proposals), groups every proposal into an object cluster or the background
cluster, and packages the result as supervision for the next stream: either
per-proposal weighted labels or cluster bags.

Conventions: object class ids are 1..C, the background label is C+1, and
score-matrix row c-1 holds class c. Score matrices may have C or C+1 rows;
only the object rows are ever read here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .geometry import iou_matrix, validate_boxes

__all__ = [
    "ClusterCenter",
    "ObjectCluster",
    "BackgroundCluster",
    "ProposalClusters",
    "ProposalLabels",
    "ClusterBags",
    "select_top_ranking",
    "build_graph",
    "find_centers_highest",
    "find_centers_graph",
    "generate_clusters",
    "supervision_labels",
    "supervision_bags",
    "build_supervision",
    "clusters_to_record",
]


@dataclass(frozen=True)
class ClusterCenter:
    proposal_index: int
    box: tuple[float, float, float, float]
    label: int  # 1..C
    confidence: float  # in (0, 1]


@dataclass(frozen=True)
class ObjectCluster:
    label: int  # 1..C
    confidence: float
    center_index: int
    member_indices: tuple[int, ...]


@dataclass(frozen=True)
class BackgroundCluster:
    member_indices: tuple[int, ...]
    member_confidences: tuple[float, ...]


@dataclass(frozen=True)
class ProposalClusters:
    """One image's clusters: object clusters plus the background cluster."""

    objects: tuple[ObjectCluster, ...]
    background: BackgroundCluster
    num_proposals: int
    num_classes: int

    @property
    def background_label(self) -> int:
        return self.num_classes + 1

    def all_member_indices(self) -> list[int]:
        out: list[int] = []
        for cl in self.objects:
            out.extend(cl.member_indices)
        out.extend(self.background.member_indices)
        return out


@dataclass(frozen=True)
class ProposalLabels:
    """Per-proposal supervision: one label in 1..C+1 and one weight each."""

    labels: np.ndarray  # (R,) int
    weights: np.ndarray  # (R,) float


@dataclass(frozen=True)
class ClusterBags:
    """Bag supervision: each cluster is a small bag with the cluster label."""

    clusters: ProposalClusters

    def bags(self) -> list[ObjectCluster | BackgroundCluster]:
        out: list[ObjectCluster | BackgroundCluster] = list(self.clusters.objects)
        if self.clusters.background.member_indices:
            out.append(self.clusters.background)
        return out


# ---------------------------------------------------------------------------
# top-ranking proposal selection (1-D k-means over scores)
# ---------------------------------------------------------------------------


def _kmeans_1d(values: np.ndarray, n_clusters: int, max_iter: int = 100):
    """Deterministic Lloyd iterations on scalars.

    Centers start at the (2i+1)/(2n) quantiles, distance ties go to the
    lower-valued center, and a center whose cluster empties keeps its
    previous value. Centers are kept sorted ascending.
    """
    probs = [(2 * i + 1) / (2 * n_clusters) for i in range(n_clusters)]
    centers = np.quantile(values, probs)
    centers.sort()
    for _ in range(max_iter):
        assign = np.argmin(np.abs(values[:, None] - centers[None, :]), axis=1)
        new_centers = centers.copy()
        for j in range(n_clusters):
            members = values[assign == j]
            if members.size:
                new_centers[j] = members.mean()
        new_centers.sort()
        if np.array_equal(new_centers, centers):
            break
        centers = new_centers
    assign = np.argmin(np.abs(values[:, None] - centers[None, :]), axis=1)
    return assign, centers


def select_top_ranking(class_scores, n_clusters: int) -> list[int]:
    """Indices of the proposals in the highest-centered score cluster.

    Falls back to the argmax proposal alone when there are fewer proposals
    than clusters.
    """
    scores = np.asarray(class_scores, dtype=np.float64).ravel()
    if scores.size < 1:
        raise ConfigError("need at least one proposal score")
    if n_clusters < 1:
        raise ConfigError(f"n_clusters must be >= 1, got {n_clusters}")
    if not np.all(np.isfinite(scores)):
        raise DataError("proposal scores must be finite")
    if scores.size < n_clusters:
        return [int(np.argmax(scores))]
    assign, centers = _kmeans_1d(scores, n_clusters)
    top = int(np.argmax(centers))
    idx = np.flatnonzero(assign == top)
    if idx.size == 0:
        return [int(np.argmax(scores))]
    return [int(i) for i in idx]


# ---------------------------------------------------------------------------
# cluster center finding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProposalGraph:
    """Undirected overlap graph over a subset of proposals (no self-loops)."""

    vertices: tuple[int, ...]
    adjacency: dict[int, frozenset[int]]


def build_graph(boxes, indices, iou_threshold: float) -> ProposalGraph:
    """Connect two proposals iff their IoU strictly exceeds the threshold."""
    boxes = validate_boxes(boxes)
    idx = list(indices)
    if len(set(idx)) != len(idx):
        raise DataError("graph vertex indices must be distinct")
    sub = boxes[idx]
    overlaps = iou_matrix(sub, sub)
    adj: dict[int, set[int]] = {i: set() for i in idx}
    for a in range(len(idx)):
        for b in range(a + 1, len(idx)):
            if overlaps[a, b] > iou_threshold:
                adj[idx[a]].add(idx[b])
                adj[idx[b]].add(idx[a])
    return ProposalGraph(
        vertices=tuple(idx),
        adjacency={i: frozenset(s) for i, s in adj.items()},
    )


def _positive_classes(image_labels) -> list[int]:
    labels = np.asarray(image_labels).ravel()
    positives = [c for c in range(labels.size) if labels[c] == 1]
    if not positives:
        raise DataError("training image has no positive class")
    return positives


def _best_available(scores_c: np.ndarray, claimed: set[int]) -> int | None:
    """Highest-scoring unclaimed proposal, or None when everything is claimed
    (only possible when positive classes outnumber available proposals)."""
    avail = [r for r in range(scores_c.size) if r not in claimed]
    if not avail:
        return None
    return max(avail, key=lambda r: (scores_c[r], -r))


def find_centers_highest(scores_prev, image_labels, boxes) -> list[ClusterCenter]:
    """One center per positive class: its highest-scoring proposal.

    When several classes pick the same proposal, the class with the highest
    predicted score keeps it and the others re-choose among unclaimed
    proposals; classes commit in descending order of their current best
    score (ties to the lower class index).
    """
    boxes = validate_boxes(boxes)
    scores = np.asarray(scores_prev, dtype=np.float64)
    positives = _positive_classes(image_labels)
    remaining = set(positives)
    claimed: set[int] = set()
    chosen: dict[int, ClusterCenter] = {}
    while remaining:
        best: tuple[float, int, int] | None = None  # (score, -class, proposal)
        for c in sorted(remaining):
            r = _best_available(scores[c], claimed)
            if r is None:
                remaining.discard(c)
                continue
            cand = (scores[c, r], -c, r)
            if best is None or cand[:2] > best[:2]:
                best = cand
        if best is None:
            break  # every proposal claimed; later classes get no center
        score, neg_c, r = best
        c = -neg_c
        chosen[c] = ClusterCenter(
            proposal_index=r,
            box=tuple(boxes[r]),
            label=c + 1,
            confidence=float(score),
        )
        claimed.add(r)
        remaining.remove(c)
    return [chosen[c] for c in sorted(chosen)]


def _greedy_graph_selection(
    scores_c: np.ndarray, graph: ProposalGraph
) -> list[tuple[int, float]]:
    """Repeatedly pick the most-connected remaining vertex as a center.

    Tie order: degree desc, class score desc, proposal index asc. The chosen
    center's confidence is the max score over itself and its remaining
    neighbors, all of which are then removed.
    """
    remaining = set(graph.vertices)
    picks: list[tuple[int, float]] = []
    while remaining:
        best_key = None
        best_v = None
        for v in sorted(remaining):
            degree = len(graph.adjacency[v] & remaining)
            key = (degree, scores_c[v], -v)
            if best_key is None or key > best_key:
                best_key, best_v = key, v
        group = (graph.adjacency[best_v] & remaining) | {best_v}
        confidence = max(scores_c[u] for u in group)
        picks.append((best_v, float(confidence)))
        remaining -= group
    return picks


def find_centers_graph(
    scores_prev,
    image_labels,
    boxes,
    *,
    graph_iou_threshold: float = 0.4,
    kmeans_clusters: int = 3,
    max_centers: int = 5,
) -> list[ClusterCenter]:
    """Centers from graphs of top-ranking proposals, per positive class.

    For each positive class the top-ranking proposals (highest 1-D k-means
    score group) form an overlap graph; centers are picked greedily by
    maximum degree. Classes commit in descending order of their strongest
    candidate's confidence, and committed proposal indices are excluded from
    the later classes' selections so no proposal centers two classes. Each
    class keeps at most `max_centers` centers (highest confidence first).
    """
    boxes = validate_boxes(boxes)
    scores = np.asarray(scores_prev, dtype=np.float64)
    positives = _positive_classes(image_labels)
    top_ranking = {c: select_top_ranking(scores[c], kmeans_clusters) for c in positives}

    remaining = set(positives)
    claimed: set[int] = set()
    selected: dict[int, list[ClusterCenter]] = {}
    while remaining:
        candidates: dict[int, list[tuple[int, float]]] = {}
        for c in sorted(remaining):
            verts = [r for r in top_ranking[c] if r not in claimed]
            if verts:
                graph = build_graph(boxes, verts, graph_iou_threshold)
                candidates[c] = _greedy_graph_selection(scores[c], graph)
            else:
                r = _best_available(scores[c], claimed)
                if r is None:
                    remaining.discard(c)
                    continue
                candidates[c] = [(r, float(scores[c, r]))]
        if not candidates:
            break  # every proposal claimed; later classes get no center
        strongest = max(
            sorted(candidates),
            key=lambda c: (max(conf for _, conf in candidates[c]), -c),
        )
        keep = sorted(candidates[strongest], key=lambda t: (-t[1], t[0]))[:max_centers]
        selected[strongest] = [
            ClusterCenter(
                proposal_index=r,
                box=tuple(boxes[r]),
                label=strongest + 1,
                confidence=conf,
            )
            for r, conf in sorted(keep)
        ]
        claimed |= {r for r, _ in keep}
        remaining.remove(strongest)
    return [center for c in sorted(selected) for center in selected[c]]


# ---------------------------------------------------------------------------
# cluster generation and supervisions
# ---------------------------------------------------------------------------


def generate_clusters(
    boxes, centers: list[ClusterCenter], cluster_iou_threshold: float, num_classes: int
) -> ProposalClusters:
    """Assign every proposal to its most-overlapping center's cluster.

    A proposal joins the object cluster of its highest-IoU center when that
    IoU strictly exceeds the threshold; otherwise it joins the background
    cluster carrying that center's confidence. IoU ties go to the
    lowest-indexed center, except that a proposal which *is* a center always
    joins its own cluster.
    """
    boxes = validate_boxes(boxes)
    if not centers:
        raise ConfigError("cluster generation needs at least one center")
    if not 0.0 < cluster_iou_threshold < 1.0:
        raise ConfigError("cluster IoU threshold must lie in (0, 1)")
    center_boxes = np.array([c.box for c in centers], dtype=np.float64)
    overlaps = iou_matrix(boxes, center_boxes)  # (R, N)
    own_cluster = {c.proposal_index: n for n, c in enumerate(centers)}

    members: list[list[int]] = [[] for _ in centers]
    bg_indices: list[int] = []
    bg_confidences: list[float] = []
    for r in range(boxes.shape[0]):
        n = own_cluster.get(r)
        if n is None:
            n = int(np.argmax(overlaps[r]))
        if overlaps[r, n] > cluster_iou_threshold:
            members[n].append(r)
        else:
            bg_indices.append(r)
            bg_confidences.append(centers[n].confidence)

    objects = tuple(
        ObjectCluster(
            label=center.label,
            confidence=center.confidence,
            center_index=center.proposal_index,
            member_indices=tuple(members[n]),
        )
        for n, center in enumerate(centers)
    )
    return ProposalClusters(
        objects=objects,
        background=BackgroundCluster(tuple(bg_indices), tuple(bg_confidences)),
        num_proposals=boxes.shape[0],
        num_classes=num_classes,
    )


def supervision_labels(clusters: ProposalClusters) -> ProposalLabels:
    """Per-proposal labels: cluster label with the cluster confidence as weight."""
    labels = np.zeros(clusters.num_proposals, dtype=np.int64)
    weights = np.zeros(clusters.num_proposals, dtype=np.float64)
    for cl in clusters.objects:
        for r in cl.member_indices:
            labels[r] = cl.label
            weights[r] = cl.confidence
    bg_label = clusters.background_label
    for r, s in zip(clusters.background.member_indices, clusters.background.member_confidences):
        labels[r] = bg_label
        weights[r] = s
    return ProposalLabels(labels=labels, weights=weights)


def supervision_bags(clusters: ProposalClusters) -> ClusterBags:
    return ClusterBags(clusters=clusters)


def build_supervision(
    scores_prev,
    image_labels,
    boxes,
    *,
    center_method: str = "graph",
    refine_loss: str = "bag",
    graph_iou_threshold: float = 0.4,
    cluster_iou_threshold: float = 0.5,
    kmeans_clusters: int = 3,
    max_centers: int = 5,
):
    """Full supervision step for one stream: centers -> clusters -> labels/bags.

    Returns (supervision, clusters); the supervision is a ProposalLabels for
    the assigned losses (unit weights for the unweighted variant) or a
    ClusterBags for the bag loss.
    """
    if center_method == "highest":
        centers = find_centers_highest(scores_prev, image_labels, boxes)
    elif center_method == "graph":
        centers = find_centers_graph(
            scores_prev,
            image_labels,
            boxes,
            graph_iou_threshold=graph_iou_threshold,
            kmeans_clusters=kmeans_clusters,
            max_centers=max_centers,
        )
    else:
        raise ConfigError(f"unknown center_method: {center_method!r}")
    num_classes = np.asarray(image_labels).ravel().size
    clusters = generate_clusters(boxes, centers, cluster_iou_threshold, num_classes)
    if refine_loss == "bag":
        return supervision_bags(clusters), clusters
    if refine_loss in ("assigned", "assigned_weighted"):
        sup = supervision_labels(clusters)
        if refine_loss == "assigned":
            sup = ProposalLabels(labels=sup.labels, weights=np.ones_like(sup.weights))
        return sup, clusters
    raise ConfigError(f"unknown refine_loss: {refine_loss!r}")


def clusters_to_record(image_id: str, stream: int, clusters: ProposalClusters) -> dict:
    """JSON-ready debug dump of one image's clusters at one stream."""
    return {
        "image_id": image_id,
        "stream": stream,
        "num_proposals": clusters.num_proposals,
        "object_clusters": [
            {
                "label": cl.label,
                "confidence": cl.confidence,
                "center_index": cl.center_index,
                "member_indices": list(cl.member_indices),
            }
            for cl in clusters.objects
        ],
        "background": {
            "label": clusters.background_label,
            "member_indices": list(clusters.background.member_indices),
            "member_confidences": list(clusters.background.member_confidences),
        },
    }
