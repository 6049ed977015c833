"""Detection-head losses: IoU-weighted cross-entropy and smooth-L1 regression.

Positive-sample CE terms are reweighted by IoU^exponent with a normalization
that preserves the total positive loss (sum of w_i * CE_i equals sum of
CE_i). The weights are treated as constants when differentiating: they are
recomputed from the current IoUs each step but gradients flow through the
CE terms only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Deltas

DEFAULT_IOU_EXPONENT = 1.75
PROB_FLOOR = 1e-12


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ClassScores:
    """Per-anchor class logits; probabilities are their softmax."""

    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 1:
            raise ValueError(f"logits must be a 1-D vector, got shape {self.logits.shape}")

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits)

    @property
    def num_classes(self) -> int:
        return self.logits.shape[0]


@dataclass
class LossReport:
    """Loss values plus the per-positive weights and analytic gradients."""

    cls_loss: float
    reg_loss: float = 0.0
    weights: np.ndarray = field(default_factory=lambda: np.empty(0))
    gradients: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def total(self) -> float:
        return self.cls_loss + self.reg_loss


def cross_entropy(scores, label: int) -> float:
    """-log of the probability assigned to `label`, floored at 1e-12."""
    probs = scores.probs if isinstance(scores, ClassScores) else np.asarray(scores, dtype=np.float64)
    if not 0 <= label < probs.shape[-1]:
        raise ValueError(f"label {label} out of range for {probs.shape[-1]} classes")
    return float(-np.log(max(float(probs[label]), PROB_FLOOR)))


def cross_entropy_rows(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Vectorized CE over (N, C) probability rows and (N,) labels."""
    picked = probs[np.arange(probs.shape[0]), labels]
    return -np.log(np.maximum(picked, PROB_FLOOR))


def softmax_ce_grad(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d CE / d logits for each row: probs minus the label one-hot.

    Rows whose true-class probability sits below the floor contribute a
    constant (clamped) loss, so their gradient is exactly zero.
    """
    grad = probs.copy()
    grad[np.arange(probs.shape[0]), labels] -= 1.0
    clamped = probs[np.arange(probs.shape[0]), labels] < PROB_FLOOR
    grad[clamped] = 0.0
    return grad


def iou_weights(ious, ces, exponent: float = DEFAULT_IOU_EXPONENT) -> np.ndarray:
    """Loss-preserving IoU weights for positive samples.

    w_i = IoU_i^exponent * sum(CE) / sum(IoU^exponent * CE). When every
    IoU^exponent is identical the normalization cancels exactly and the
    weights are all ones; a zero denominator (all IoUs or all CEs zero)
    also yields ones, the continuous limit in which the weights carry no
    signal.
    """
    ious = np.asarray(ious, dtype=np.float64)
    ces = np.asarray(ces, dtype=np.float64)
    if ious.shape != ces.shape or ious.ndim != 1 or ious.size == 0:
        raise ValueError("ious and ces must be 1-D, nonempty, and the same length")
    if np.any(ious < 0) or np.any(ces < 0):
        raise ValueError("ious and ces must be nonnegative")
    powered = ious**exponent
    if np.all(powered == powered[0]):
        return np.ones_like(ious)
    denom = float(np.sum(powered * ces))
    if denom == 0.0:
        return np.ones_like(ious)
    return powered * (float(np.sum(ces)) / denom)


def weighted_cls_loss_arrays(
    pos_logits: np.ndarray,
    pos_labels: np.ndarray,
    pos_ious: np.ndarray,
    neg_logits: np.ndarray,
    exponent: float = DEFAULT_IOU_EXPONENT,
    weights_override: np.ndarray | None = None,
):
    """Classification loss and logit gradients over positive/negative rows.

    Returns (loss, weights, d_pos_logits, d_neg_logits). Passing
    `weights_override` evaluates the loss with frozen weights, which is the
    function the analytic gradient differentiates (weights are constants).
    """
    n_pos = pos_logits.shape[0]
    if n_pos:
        pos_probs = softmax(pos_logits)
        pos_ce = cross_entropy_rows(pos_probs, pos_labels)
        if weights_override is not None:
            weights = np.asarray(weights_override, dtype=np.float64)
        else:
            weights = iou_weights(pos_ious, pos_ce, exponent)
        d_pos = softmax_ce_grad(pos_probs, pos_labels) * weights[:, None]
        loss = float(np.sum(weights * pos_ce))
    else:
        weights = np.empty(0)
        d_pos = np.zeros_like(pos_logits)
        loss = 0.0
    if neg_logits.shape[0]:
        neg_probs = softmax(neg_logits)
        neg_labels = np.zeros(neg_logits.shape[0], dtype=np.int64)
        loss += float(np.sum(cross_entropy_rows(neg_probs, neg_labels)))
        d_neg = softmax_ce_grad(neg_probs, neg_labels)
    else:
        d_neg = np.zeros_like(neg_logits)
    return loss, weights, d_pos, d_neg


def iou_balanced_cls_loss(
    pos: Sequence[tuple[ClassScores, int, float]],
    neg: Sequence[ClassScores],
    exponent: float = DEFAULT_IOU_EXPONENT,
) -> LossReport:
    """Classification loss over positive (scores, label, iou) triples and
    background negatives, with per-positive weights from `iou_weights`."""
    n_classes = pos[0][0].num_classes if pos else (neg[0].num_classes if neg else 0)
    pos_logits = np.array([p[0].logits for p in pos], dtype=np.float64).reshape(len(pos), n_classes)
    pos_labels = np.array([p[1] for p in pos], dtype=np.int64)
    pos_ious = np.array([p[2] for p in pos], dtype=np.float64)
    neg_logits = np.array([s.logits for s in neg], dtype=np.float64).reshape(len(neg), n_classes)
    for label in pos_labels:
        if not 1 <= label < n_classes:
            raise ValueError(f"positive label {label} out of range [1, {n_classes - 1}]")
    loss, weights, d_pos, d_neg = weighted_cls_loss_arrays(
        pos_logits, pos_labels, pos_ious, neg_logits, exponent
    )
    return LossReport(
        cls_loss=loss,
        weights=weights,
        gradients={"pos_logits": d_pos, "neg_logits": d_neg},
    )


def smooth_l1(diff: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed smooth-L1 of an error array and its elementwise gradient."""
    diff = np.asarray(diff, dtype=np.float64)
    absd = np.abs(diff)
    quad = absd < 1.0
    loss = float(np.sum(np.where(quad, 0.5 * diff * diff, absd - 0.5)))
    grad = np.where(quad, diff, np.sign(diff))
    return loss, grad


def box_regression_loss(pred: Deltas, target: Deltas) -> tuple[float, np.ndarray]:
    """Smooth-L1 over the six delta components; returns (loss, gradient)."""
    return smooth_l1(pred.as_array() - target.as_array())
