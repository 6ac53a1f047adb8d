"""The trainable scoring model.

A shared linear embedding with a rectifier feeds three kinds of linear
heads: two basic branches (classification and detection, combined by a
pair of softmaxes into per-proposal scores and pooled into image scores)
and K refinement heads, each a plain (C+1)-way softmax classifier over
proposals. This module is forward-only; gradients live in `losses`.

Score-matrix layout follows the math: stream 0 scores are (C, R), refined
stream scores are (C+1, R) with the last row being background. Class ids
on public surfaces are 1-based (1..C); row c-1 holds class c.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

CHECKPOINT_SCHEMA = "pcldet-checkpoint-v1"


@dataclass
class ModelParams:
    """Every array SGD updates. All float64."""

    w_emb: np.ndarray  # (D_raw, D)
    b_emb: np.ndarray  # (D,)
    w_cls: np.ndarray  # (D, C)
    b_cls: np.ndarray  # (C,)
    w_det: np.ndarray  # (D, C)
    b_det: np.ndarray  # (C,)
    w_refine: list[np.ndarray] = field(default_factory=list)  # K x (D, C+1)
    b_refine: list[np.ndarray] = field(default_factory=list)  # K x (C+1,)

    @property
    def num_classes(self) -> int:
        return self.w_cls.shape[1]

    @property
    def num_refinements(self) -> int:
        return len(self.w_refine)

    @property
    def raw_dim(self) -> int:
        return self.w_emb.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.w_emb.shape[1]

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Stable (name, array) listing; refinement heads are indexed from 1."""
        out = [
            ("w_emb", self.w_emb),
            ("b_emb", self.b_emb),
            ("w_cls", self.w_cls),
            ("b_cls", self.b_cls),
            ("w_det", self.w_det),
            ("b_det", self.b_det),
        ]
        for k, (w, b) in enumerate(zip(self.w_refine, self.b_refine), start=1):
            out.append((f"w_refine_{k}", w))
            out.append((f"b_refine_{k}", b))
        return out

    def zeros_like(self) -> "ModelParams":
        return ModelParams(
            w_emb=np.zeros_like(self.w_emb),
            b_emb=np.zeros_like(self.b_emb),
            w_cls=np.zeros_like(self.w_cls),
            b_cls=np.zeros_like(self.b_cls),
            w_det=np.zeros_like(self.w_det),
            b_det=np.zeros_like(self.b_det),
            w_refine=[np.zeros_like(w) for w in self.w_refine],
            b_refine=[np.zeros_like(b) for b in self.b_refine],
        )

    def copy(self) -> "ModelParams":
        return ModelParams(
            w_emb=self.w_emb.copy(),
            b_emb=self.b_emb.copy(),
            w_cls=self.w_cls.copy(),
            b_cls=self.b_cls.copy(),
            w_det=self.w_det.copy(),
            b_det=self.b_det.copy(),
            w_refine=[w.copy() for w in self.w_refine],
            b_refine=[b.copy() for b in self.b_refine],
        )


def init_params(
    raw_dim: int,
    embed_dim: int,
    num_classes: int,
    num_refinements: int,
    rng: np.random.Generator,
    weight_std: float = 0.01,
) -> ModelParams:
    """Gaussian weights (0-mean, small std), zero biases."""
    if num_classes < 1 or num_refinements < 0 or raw_dim < 1 or embed_dim < 1:
        raise ConfigError("model dimensions must be positive and K >= 0")

    def w(*shape):
        return rng.normal(0.0, weight_std, size=shape)

    return ModelParams(
        w_emb=w(raw_dim, embed_dim),
        b_emb=np.zeros(embed_dim),
        w_cls=w(embed_dim, num_classes),
        b_cls=np.zeros(num_classes),
        w_det=w(embed_dim, num_classes),
        b_det=np.zeros(num_classes),
        w_refine=[w(embed_dim, num_classes + 1) for _ in range(num_refinements)],
        b_refine=[np.zeros(num_classes + 1) for _ in range(num_refinements)],
    )


def softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    """Numerically stable softmax (max-subtraction)."""
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=axis, keepdims=True)


def embed(raw: np.ndarray, params: ModelParams) -> np.ndarray:
    """Shared proposal embedding: rectified linear map of the raw features."""
    F, _ = embed_with_preact(raw, params)
    return F


def embed_with_preact(raw: np.ndarray, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != params.raw_dim:
        raise ConfigError(
            f"raw features must have shape (R, {params.raw_dim}), got {raw.shape}"
        )
    pre = raw @ params.w_emb + params.b_emb
    return np.maximum(pre, 0.0), pre


def forward_basic(F: np.ndarray, params: ModelParams):
    """Two-branch head: per-proposal scores (C, R) and pooled image scores (C,).

    The classification branch is softmaxed over classes per proposal, the
    detection branch over proposals per class; their elementwise product is
    the proposal score matrix and its row sums are the image scores.
    """
    fwd = _forward_basic_full(F, params)
    return fwd["scores"], fwd["image_scores"]


def _forward_basic_full(F: np.ndarray, params: ModelParams) -> dict:
    x_cls = (F @ params.w_cls + params.b_cls).T  # (C, R)
    x_det = (F @ params.w_det + params.b_det).T  # (C, R)
    sig_cls = softmax(x_cls, axis=0)
    sig_det = softmax(x_det, axis=1)
    scores = sig_cls * sig_det
    return {
        "x_cls": x_cls,
        "x_det": x_det,
        "sig_cls": sig_cls,
        "sig_det": sig_det,
        "scores": scores,
        "image_scores": scores.sum(axis=1),
    }


def forward_refined(F: np.ndarray, params: ModelParams, k: int) -> np.ndarray:
    """Scores of refinement head k (1..K): (C+1, R), columns sum to 1."""
    if not 1 <= k <= params.num_refinements:
        raise ConfigError(
            f"refinement stream k={k} out of range 1..{params.num_refinements}"
        )
    logits = F @ params.w_refine[k - 1] + params.b_refine[k - 1]  # (R, C+1)
    return softmax(logits, axis=1).T


@dataclass
class ForwardPass:
    """All intermediates of one image's forward pass, kept for backprop."""

    raw: np.ndarray
    preact: np.ndarray
    F: np.ndarray
    x_cls: np.ndarray
    x_det: np.ndarray
    sig_cls: np.ndarray
    sig_det: np.ndarray
    basic_scores: np.ndarray  # (C, R)
    image_scores: np.ndarray  # (C,)
    refined_scores: list[np.ndarray]  # K x (C+1, R)


def forward_all(raw: np.ndarray, params: ModelParams) -> ForwardPass:
    """Run every stream on the shared embedding of one image."""
    F, pre = embed_with_preact(raw, params)
    basic = _forward_basic_full(F, params)
    refined = [forward_refined(F, params, k) for k in range(1, params.num_refinements + 1)]
    return ForwardPass(
        raw=raw,
        preact=pre,
        F=F,
        x_cls=basic["x_cls"],
        x_det=basic["x_det"],
        sig_cls=basic["sig_cls"],
        sig_det=basic["sig_det"],
        basic_scores=basic["scores"],
        image_scores=basic["image_scores"],
        refined_scores=refined,
    )


def save_params(params: ModelParams, path: str, extra: dict | None = None) -> None:
    """Write a self-describing JSON checkpoint. Round-trips bit-exactly."""
    arrays = {}
    for name, arr in params.named_arrays():
        arrays[name] = {"shape": list(arr.shape), "data": arr.ravel().tolist()}
    doc = {
        "schema": CHECKPOINT_SCHEMA,
        "num_classes": params.num_classes,
        "raw_dim": params.raw_dim,
        "embed_dim": params.embed_dim,
        "num_refinements": params.num_refinements,
        "arrays": arrays,
    }
    if extra:
        doc["extra"] = extra
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def load_params(path: str) -> tuple[ModelParams, dict]:
    """Load a checkpoint written by save_params; returns (params, extra)."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema") != CHECKPOINT_SCHEMA:
        raise ConfigError(f"unsupported checkpoint schema: {doc.get('schema')!r}")

    def arr(name):
        entry = doc["arrays"][name]
        return np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])

    k = doc["num_refinements"]
    params = ModelParams(
        w_emb=arr("w_emb"),
        b_emb=arr("b_emb"),
        w_cls=arr("w_cls"),
        b_cls=arr("b_cls"),
        w_det=arr("w_det"),
        b_det=arr("b_det"),
        w_refine=[arr(f"w_refine_{i}") for i in range(1, k + 1)],
        b_refine=[arr(f"b_refine_{i}") for i in range(1, k + 1)],
    )
    return params, doc.get("extra", {})
