"""Anchor labeling against ground-truth boxes.

Rules, in order of application:
  1. threshold pass: an anchor whose best IoU over GT boxes is >= `pos_iou`
     becomes positive for its argmax-IoU GT; best IoU < `neg_iou` becomes
     negative; everything between is ignored. Ties at exactly `pos_iou`
     count as positive, ties at exactly `neg_iou` as ignore.
  2. forced pass (overrides pass 1): every GT claims its globally
     highest-IoU anchor so each GT has at least one positive. When two GTs
     claim the same anchor the larger IoU wins (ties: lower GT index) and
     the loser falls back to its next-best unclaimed anchor.

Positives carry the deltas that decode their anchor onto the matched GT box.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .geometry import AnchorGrid, Deltas, encode_boxes
from .kernels import pairwise_iou_matrix
from .landmarks import BOX_SIZES, NUM_LANDMARKS

POSITIVE = 1
IGNORE = 0
NEGATIVE = -1

POS_IOU_DEFAULT = 0.5
NEG_IOU_DEFAULT = 0.25


@dataclass
class GroundTruth:
    """Landmark positions and their class-sized boxes for one volume.

    landmarks: (5, 3) voxel coordinates in landmark order; boxes: (5, 6)
    centered on the landmarks with per-class extents (14 for eyes, 24
    otherwise).
    """

    landmarks: np.ndarray
    boxes: np.ndarray

    def __post_init__(self):
        self.landmarks = np.asarray(self.landmarks, dtype=np.float64)
        self.boxes = np.asarray(self.boxes, dtype=np.float64)
        if self.landmarks.shape != (NUM_LANDMARKS, 3):
            raise ValueError(f"expected ({NUM_LANDMARKS}, 3) landmarks, got {self.landmarks.shape}")
        if self.boxes.shape != (NUM_LANDMARKS, 6):
            raise ValueError(f"expected ({NUM_LANDMARKS}, 6) boxes, got {self.boxes.shape}")
        if not np.all(np.isfinite(self.landmarks)):
            raise ValueError("landmarks must be finite")
        if np.any(self.boxes[:, 3:] <= 0):
            raise ValueError("ground-truth box extents must be positive")

    @classmethod
    def from_landmarks(cls, points: np.ndarray) -> "GroundTruth":
        points = np.asarray(points, dtype=np.float64)
        boxes = np.empty((NUM_LANDMARKS, 6), dtype=np.float64)
        boxes[:, :3] = points
        boxes[:, 3:] = np.array(BOX_SIZES, dtype=np.float64)[:, None]
        return cls(points, boxes)


@dataclass(frozen=True)
class AnchorLabel:
    """Per-anchor view of an assignment (see `Assignment.label`)."""

    state: int  # POSITIVE / NEGATIVE / IGNORE
    class_id: int  # 1..K for positives, 0 otherwise
    matched_gt: Optional[int]
    regression_target: Optional[Deltas]


@dataclass
class Assignment:
    """Array-backed labeling of every anchor in a grid.

    state / class_id / matched_gt cover all anchors; regression targets are
    stored densely for the positive subset only (aligned with
    positive_indices, which is sorted ascending).
    """

    state: np.ndarray  # (N,) int8
    class_id: np.ndarray  # (N,) int16
    matched_gt: np.ndarray  # (N,) int32, -1 where unmatched
    positive_indices: np.ndarray  # (P,) int64
    regression_targets: np.ndarray  # (P, 6) float64
    max_iou: np.ndarray  # (N,) float64

    @property
    def n_anchors(self) -> int:
        return self.state.shape[0]

    def label(self, index: int) -> AnchorLabel:
        state = int(self.state[index])
        if state != POSITIVE:
            return AnchorLabel(state, 0, None, None)
        pos = int(np.searchsorted(self.positive_indices, index))
        target = Deltas.from_array(self.regression_targets[pos])
        return AnchorLabel(POSITIVE, int(self.class_id[index]), int(self.matched_gt[index]), target)

    def labels(self) -> Iterator[AnchorLabel]:
        return (self.label(i) for i in range(self.n_anchors))


def match_anchors(
    grid: AnchorGrid,
    gt: GroundTruth,
    pos_iou: float = POS_IOU_DEFAULT,
    neg_iou: float = NEG_IOU_DEFAULT,
) -> Assignment:
    """Label every anchor positive/negative/ignore against the GT boxes."""
    anchors = grid.boxes
    n = anchors.shape[0]
    iou = pairwise_iou_matrix(anchors, gt.boxes)
    best_gt = np.argmax(iou, axis=1)
    best_iou = iou[np.arange(n), best_gt]

    state = np.zeros(n, dtype=np.int8)
    state[best_iou < neg_iou] = NEGATIVE
    positive_mask = best_iou >= pos_iou
    state[positive_mask] = POSITIVE

    matched = np.where(positive_mask, best_gt.astype(np.int32), np.int32(-1))

    # Forced pass: each GT claims its best anchor, larger IoU wins conflicts.
    forced = _force_matches(iou)
    for g, anchor_idx in enumerate(forced):
        state[anchor_idx] = POSITIVE
        matched[anchor_idx] = g

    pos_idx = np.nonzero(state == POSITIVE)[0].astype(np.int64)
    class_id = np.zeros(n, dtype=np.int16)
    class_id[pos_idx] = (matched[pos_idx] + 1).astype(np.int16)
    targets = encode_boxes(anchors[pos_idx], gt.boxes[matched[pos_idx]])

    return Assignment(
        state=state,
        class_id=class_id,
        matched_gt=matched,
        positive_indices=pos_idx,
        regression_targets=targets,
        max_iou=best_iou,
    )


def _force_matches(iou: np.ndarray) -> np.ndarray:
    """Anchor index claimed by each GT under the larger-IoU-wins rule."""
    n_gt = iou.shape[1]
    assigned = np.full(n_gt, -1, dtype=np.int64)
    taken: set[int] = set()
    unresolved = list(range(n_gt))
    while unresolved:
        claims: dict[int, list[int]] = {}
        for g in unresolved:
            col = iou[:, g]
            if taken:
                col = col.copy()
                col[list(taken)] = -np.inf
            claims.setdefault(int(np.argmax(col)), []).append(g)
        next_round = []
        for anchor_idx, gts in claims.items():
            winner = min(gts, key=lambda g: (-iou[anchor_idx, g], g))
            assigned[winner] = anchor_idx
            taken.add(anchor_idx)
            next_round.extend(g for g in gts if g != winner)
        unresolved = next_round
    return assigned
