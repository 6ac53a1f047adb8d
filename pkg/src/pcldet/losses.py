"""Loss functions and their closed-form gradients.

Stream 0 uses a per-class binary cross entropy on the pooled image scores;
refinement streams use either a weighted softmax loss over per-proposal
cluster labels or a bag loss that averages scores within each object
cluster. Supervisions are constants: no gradient ever flows into labels,
weights, or cluster structure, only into the model parameters.

Everything is float64 and logs are clamped at EPS; gradients are silenced
where the clamp is active so the analytic values match finite differences
of the implemented (clamped) functions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clustering import ClusterBags, ProposalLabels
from .errors import ConfigError
from .model import ForwardPass, ModelParams

EPS = 1e-9

__all__ = ["EPS", "LossReport", "loss_basic", "loss_assigned", "loss_bag", "total_loss"]


@dataclass
class LossReport:
    total: float
    per_stream: list[float]
    grads: ModelParams  # same shapes as the parameters, nothing else


def loss_basic(image_scores, label_vector):
    """Multi-class binary cross entropy on pooled image scores.

    Returns (loss, gradient wrt the image scores).
    """
    phi = np.asarray(image_scores, dtype=np.float64)
    y = np.asarray(label_vector, dtype=np.float64)
    clamped = np.clip(phi, EPS, 1.0 - EPS)
    loss = -np.sum(y * np.log(clamped) + (1.0 - y) * np.log(1.0 - clamped))
    grad = -y / clamped + (1.0 - y) / (1.0 - clamped)
    grad[(phi < EPS) | (phi > 1.0 - EPS)] = 0.0
    return float(loss), grad


def loss_assigned(scores, supervision: ProposalLabels):
    """Weighted softmax loss over per-proposal cluster labels.

    `scores` is the (C+1, R) softmax output of a refinement stream. With
    unit weights this is the plain softmax loss. Returns (loss, gradient
    wrt the stream's logits, same (C+1, R) layout).
    """
    scores = np.asarray(scores, dtype=np.float64)
    num_rows, num_props = scores.shape
    labels = np.asarray(supervision.labels, dtype=np.int64)
    weights = np.asarray(supervision.weights, dtype=np.float64)
    if labels.shape != (num_props,) or weights.shape != (num_props,):
        raise ConfigError("supervision must cover every proposal exactly once")
    rows = labels - 1
    if rows.min() < 0 or rows.max() >= num_rows:
        raise ConfigError("supervision label out of range")
    cols = np.arange(num_props)
    picked = scores[rows, cols]
    loss = -np.sum(weights * np.log(np.clip(picked, EPS, None))) / num_props

    # d/dlogits of -(w/R) log softmax = (w/R) (softmax - onehot)
    grad = scores * (weights / num_props)
    grad[rows, cols] -= weights / num_props
    return float(loss), grad


def loss_bag(scores, supervision: ClusterBags, num_proposals: int):
    """Bag loss: average pooling inside object clusters, per-proposal background.

    Each object cluster contributes its confidence times its size times the
    log of the mean member score at the cluster label; background members
    contribute individually weighted background log scores. Returns
    (loss, gradient wrt the stream's logits, (C+1, R) layout).
    """
    scores = np.asarray(scores, dtype=np.float64)
    clusters = supervision.clusters
    if clusters.num_proposals != num_proposals or scores.shape[1] != num_proposals:
        raise ConfigError("bag supervision does not match the proposal count")
    bg_row = scores.shape[0] - 1

    loss = 0.0
    dscore = np.zeros_like(scores)
    for cl in clusters.objects:
        idx = np.fromiter(cl.member_indices, dtype=np.int64)
        row = cl.label - 1
        size = idx.size
        total = scores[row, idx].sum()
        mean = total / size
        loss -= cl.confidence * size * np.log(max(mean, EPS))
        if mean > EPS:
            dscore[row, idx] -= cl.confidence * size / total
    for r, lam in zip(
        clusters.background.member_indices, clusters.background.member_confidences
    ):
        p = scores[bg_row, r]
        loss -= lam * np.log(max(p, EPS))
        if p > EPS:
            dscore[bg_row, r] -= lam / p
    loss /= num_proposals
    dscore /= num_proposals

    # back through the per-column softmax
    dot = np.sum(dscore * scores, axis=0, keepdims=True)
    grad = scores * (dscore - dot)
    return float(loss), grad


def _backprop_refined(grads: ModelParams, params: ModelParams, fwd: ForwardPass,
                      k: int, dlogits: np.ndarray, dF: np.ndarray) -> None:
    dz = dlogits.T  # (R, C+1)
    grads.w_refine[k - 1] += fwd.F.T @ dz
    grads.b_refine[k - 1] += dz.sum(axis=0)
    dF += dz @ params.w_refine[k - 1].T


def _backprop_basic(grads: ModelParams, params: ModelParams, fwd: ForwardPass,
                    dimage: np.ndarray, dF: np.ndarray) -> None:
    # image score c is the row sum of the score matrix
    dscores = np.broadcast_to(dimage[:, None], fwd.basic_scores.shape)
    dsig_cls = dscores * fwd.sig_det
    dsig_det = dscores * fwd.sig_cls
    # softmax over classes (per column) and over proposals (per row)
    dx_cls = fwd.sig_cls * (
        dsig_cls - np.sum(dsig_cls * fwd.sig_cls, axis=0, keepdims=True)
    )
    dx_det = fwd.sig_det * (
        dsig_det - np.sum(dsig_det * fwd.sig_det, axis=1, keepdims=True)
    )
    grads.w_cls += fwd.F.T @ dx_cls.T
    grads.b_cls += dx_cls.sum(axis=1)
    grads.w_det += fwd.F.T @ dx_det.T
    grads.b_det += dx_det.sum(axis=1)
    dF += dx_cls.T @ params.w_cls.T
    dF += dx_det.T @ params.w_det.T


def total_loss(
    fwd: ForwardPass,
    params: ModelParams,
    label_vector,
    supervisions: list[ProposalLabels | ClusterBags],
) -> LossReport:
    """Sum of the image loss and all refinement losses, with full backprop.

    `supervisions[k-1]` supervises refinement stream k and is treated as a
    constant. Gradients reach every parameter through the shared embedding.
    """
    num_refinements = params.num_refinements
    if len(supervisions) != num_refinements:
        raise ConfigError(
            f"got {len(supervisions)} supervisions for {num_refinements} refinement streams"
        )
    grads = params.zeros_like()
    dF = np.zeros_like(fwd.F)
    per_stream: list[float] = []

    loss0, dimage = loss_basic(fwd.image_scores, label_vector)
    per_stream.append(loss0)
    _backprop_basic(grads, params, fwd, dimage, dF)

    num_props = fwd.F.shape[0]
    for k in range(1, num_refinements + 1):
        sup = supervisions[k - 1]
        scores_k = fwd.refined_scores[k - 1]
        if isinstance(sup, ClusterBags):
            loss_k, dlogits = loss_bag(scores_k, sup, num_props)
        elif isinstance(sup, ProposalLabels):
            loss_k, dlogits = loss_assigned(scores_k, sup)
        else:
            raise ConfigError(f"unsupported supervision type: {type(sup).__name__}")
        per_stream.append(loss_k)
        _backprop_refined(grads, params, fwd, k, dlogits, dF)

    # shared rectified embedding
    dpre = dF * (fwd.preact > 0.0)
    grads.w_emb += fwd.raw.T @ dpre
    grads.b_emb += dpre.sum(axis=0)

    return LossReport(total=float(sum(per_stream)), per_stream=per_stream, grads=grads)
