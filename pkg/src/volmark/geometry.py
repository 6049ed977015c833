"""Axis-aligned 3D box algebra: anchors, delta encoding, IoU, and NMS.

Boxes are (cx, cy, cz, w, h, d) in continuous voxel units; a box spans
[c - s/2, c + s/2) along each axis. Batched operations work on (N, 6)
float64 arrays; `Box3` is the scalar convenience wrapper.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .kernels import nms_keep, pairwise_iou_matrix


@dataclass(frozen=True)
class Box3:
    """Axis-aligned box: center (cx, cy, cz), extents (w, h, d) > 0."""

    cx: float
    cy: float
    cz: float
    w: float
    h: float
    d: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0 and self.d > 0):
            raise ValueError(f"box extents must be positive, got {(self.w, self.h, self.d)}")

    @property
    def volume(self) -> float:
        return self.w * self.h * self.d

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.w, self.h, self.d], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Box3":
        cx, cy, cz, w, h, d = (float(v) for v in a)
        return cls(cx, cy, cz, w, h, d)


@dataclass(frozen=True)
class Deltas:
    """Box adjustment: (tx, ty, tz) center offsets, (tw, th, td) log scales."""

    tx: float
    ty: float
    tz: float
    tw: float
    th: float
    td: float

    def __post_init__(self):
        vals = (self.tx, self.ty, self.tz, self.tw, self.th, self.td)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"deltas must be finite, got {vals}")

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz, self.tw, self.th, self.td], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Deltas":
        tx, ty, tz, tw, th, td = (float(v) for v in a)
        return cls(tx, ty, tz, tw, th, td)


ZERO_DELTAS = Deltas(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class AnchorSpec:
    """Anchor lattice parameters: cube edge lengths and feature stride.

    Every (w, h, d) triple from base_sizes^3 is laid down at each grid
    cell, so anchors_per_cell = len(base_sizes)**3.
    """

    base_sizes: tuple[float, ...] = (13.0, 16.0, 20.0, 28.0)
    stride: int = 4

    def __post_init__(self):
        if len(self.base_sizes) == 0:
            raise ValueError("base_sizes must be nonempty")
        if any(s <= 0 for s in self.base_sizes):
            raise ValueError(f"base_sizes must be positive, got {self.base_sizes}")
        if self.stride < 1:
            raise ValueError(f"stride must be a positive integer, got {self.stride}")

    @property
    def anchors_per_cell(self) -> int:
        return len(self.base_sizes) ** 3

    def cell_sizes(self) -> np.ndarray:
        """All (w, h, d) triples, ordered with d varying fastest: the anchor
        at slot a = (iw * B + ih) * B + id has sizes
        (base_sizes[iw], base_sizes[ih], base_sizes[id])."""
        return np.array(
            list(itertools.product(self.base_sizes, repeat=3)), dtype=np.float64
        )


class AnchorGrid:
    """Dense anchor lattice over a volume.

    The flat anchor order is z-major: anchor index
    ``((k * ny + j) * nx + i) * A + a`` for cell (i, j, k) and per-cell slot
    ``a`` (see `AnchorSpec.cell_sizes`). Cell (i, j, k) anchors are centered
    at ((i + 0.5) * stride, (j + 0.5) * stride, (k + 0.5) * stride). The
    boxes array is materialized lazily on first access.
    """

    def __init__(self, spec: AnchorSpec, grid_dims: tuple[int, int, int]):
        self.spec = spec
        self.grid_dims = tuple(int(v) for v in grid_dims)
        if any(v < 1 for v in self.grid_dims):
            raise ValueError(f"grid_dims must be positive, got {grid_dims}")
        self._boxes: np.ndarray | None = None

    @property
    def n_cells(self) -> int:
        nx, ny, nz = self.grid_dims
        return nx * ny * nz

    @property
    def n_anchors(self) -> int:
        return self.n_cells * self.spec.anchors_per_cell

    @property
    def boxes(self) -> np.ndarray:
        """(n_anchors, 6) float64 array in the documented flat order."""
        if self._boxes is None:
            self._boxes = self._build_boxes()
        return self._boxes

    def _build_boxes(self) -> np.ndarray:
        nx, ny, nz = self.grid_dims
        s = float(self.spec.stride)
        xs = (np.arange(nx, dtype=np.float64) + 0.5) * s
        ys = (np.arange(ny, dtype=np.float64) + 0.5) * s
        zs = (np.arange(nz, dtype=np.float64) + 0.5) * s
        # indexing="ij" over (z, y, x) flattens z-major, then y, then x
        gz, gy, gx = np.meshgrid(zs, ys, xs, indexing="ij")
        centers = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
        sizes = self.spec.cell_sizes()
        a = sizes.shape[0]
        boxes = np.empty((self.n_cells * a, 6), dtype=np.float64)
        boxes[:, :3] = np.repeat(centers, a, axis=0)
        boxes[:, 3:] = np.tile(sizes, (self.n_cells, 1))
        return boxes

    def anchor_box(self, index: int) -> Box3:
        return Box3.from_array(self.boxes[index])

    def cell_of(self, index: int) -> int:
        """Flat cell index (z-major) of an anchor."""
        return index // self.spec.anchors_per_cell

    def slot_of(self, index: int) -> int:
        """Per-cell anchor slot of an anchor."""
        return index % self.spec.anchors_per_cell


def generate_anchors(spec: AnchorSpec, volume_dims: Sequence[int]) -> AnchorGrid:
    """Lay out the anchor grid for a volume of shape volume_dims.

    grid_dims = floor(volume_dims / stride); raises ValueError when any
    dimension is smaller than the stride.
    """
    dims = tuple(int(v) for v in volume_dims)
    if len(dims) != 3 or any(v <= 0 for v in dims):
        raise ValueError(f"volume_dims must be three positive integers, got {volume_dims}")
    if any(v < spec.stride for v in dims):
        raise ValueError(f"volume_dims {dims} smaller than stride {spec.stride}")
    grid_dims = tuple(v // spec.stride for v in dims)
    return AnchorGrid(spec, grid_dims)


def decode(anchor: Box3, t: Deltas) -> Box3:
    """Apply adjustment deltas to an anchor box.

    Center moves by the offset scaled with the anchor extent on the same
    axis; extents scale by exp of the log-scale components.
    """
    return Box3(
        anchor.cx + t.tx * anchor.w,
        anchor.cy + t.ty * anchor.h,
        anchor.cz + t.tz * anchor.d,
        anchor.w * math.exp(t.tw),
        anchor.h * math.exp(t.th),
        anchor.d * math.exp(t.td),
    )


def encode(anchor: Box3, target: Box3) -> Deltas:
    """Deltas that decode `anchor` onto `target` (exact algebraic inverse)."""
    return Deltas(
        (target.cx - anchor.cx) / anchor.w,
        (target.cy - anchor.cy) / anchor.h,
        (target.cz - anchor.cz) / anchor.d,
        math.log(target.w / anchor.w),
        math.log(target.h / anchor.h),
        math.log(target.d / anchor.d),
    )


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Vectorized `decode` over (N, 6) arrays."""
    anchors = np.asarray(anchors, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    out = np.empty_like(anchors)
    out[..., :3] = anchors[..., :3] + deltas[..., :3] * anchors[..., 3:]
    out[..., 3:] = anchors[..., 3:] * np.exp(deltas[..., 3:])
    return out


def encode_boxes(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Vectorized `encode` over (N, 6) arrays."""
    anchors = np.asarray(anchors, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if np.any(targets[..., 3:] <= 0):
        raise ValueError("target extents must be positive")
    out = np.empty_like(anchors)
    out[..., :3] = (targets[..., :3] - anchors[..., :3]) / anchors[..., 3:]
    out[..., 3:] = np.log(targets[..., 3:] / anchors[..., 3:])
    return out


def iou3d(a: Box3, b: Box3) -> float:
    """Intersection over union of two boxes; 0 when interiors are disjoint.

    Scalar reference implementation: the batched kernels reproduce this
    value bit-for-bit.
    """
    lo = max(a.cx - a.w * 0.5, b.cx - b.w * 0.5)
    hi = min(a.cx + a.w * 0.5, b.cx + b.w * 0.5)
    ov0 = max(hi - lo, 0.0)
    lo = max(a.cy - a.h * 0.5, b.cy - b.h * 0.5)
    hi = min(a.cy + a.h * 0.5, b.cy + b.h * 0.5)
    ov1 = max(hi - lo, 0.0)
    lo = max(a.cz - a.d * 0.5, b.cz - b.d * 0.5)
    hi = min(a.cz + a.d * 0.5, b.cz + b.d * 0.5)
    ov2 = max(hi - lo, 0.0)
    inter = (ov0 * ov1) * ov2
    va = (a.w * a.h) * a.d
    vb = (b.w * b.h) * b.d
    return inter / ((va + vb) - inter)


def iou_aligned(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Row-wise IoU of two (N, 6) arrays (pairs, not the cross product)."""
    a = np.asarray(boxes_a, dtype=np.float64)
    b = np.asarray(boxes_b, dtype=np.float64)
    a_lo = a[..., :3] - a[..., 3:] * 0.5
    a_hi = a[..., :3] + a[..., 3:] * 0.5
    b_lo = b[..., :3] - b[..., 3:] * 0.5
    b_hi = b[..., :3] + b[..., 3:] * 0.5
    ov = np.maximum(np.minimum(a_hi, b_hi) - np.maximum(a_lo, b_lo), 0.0)
    inter = (ov[..., 0] * ov[..., 1]) * ov[..., 2]
    va = (a[..., 3] * a[..., 4]) * a[..., 5]
    vb = (b[..., 3] * b[..., 4]) * b[..., 5]
    return inter / ((va + vb) - inter)


def pairwise_iou(anchors: AnchorGrid | np.ndarray, gts: Sequence[Box3] | np.ndarray) -> np.ndarray:
    """IoU matrix between all anchors (rows) and ground-truth boxes (cols)."""
    boxes = anchors.boxes if isinstance(anchors, AnchorGrid) else np.asarray(anchors, dtype=np.float64)
    gt_arr = _boxes_to_array(gts)
    if gt_arr.shape[0] == 0:
        raise ValueError("gts must be nonempty")
    return pairwise_iou_matrix(boxes, gt_arr)


def _boxes_to_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return np.asarray(boxes, dtype=np.float64).reshape(-1, 6)
    return np.array([b.as_array() if isinstance(b, Box3) else np.asarray(b) for b in boxes], dtype=np.float64).reshape(-1, 6)


@dataclass(frozen=True)
class Detection:
    """A decoded box with its class label and classification score."""

    box: Box3
    class_id: int
    score: float
    anchor_index: int = -1
    class_scores: tuple[float, ...] = field(default=(), compare=False)

    @property
    def center(self) -> np.ndarray:
        return np.array([self.box.cx, self.box.cy, self.box.cz], dtype=np.float64)


def nms3d(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Per-class greedy non-maximum suppression.

    Within each class, detections are scanned by descending score (ties by
    lower anchor index); a detection survives iff its IoU with every kept
    same-class detection is <= iou_threshold. The merged result is sorted
    by descending score with ties broken by anchor index then class id.
    """
    if not (0.0 <= iou_threshold <= 1.0):
        raise ValueError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    survivors: list[Detection] = []
    by_class: dict[int, list[Detection]] = {}
    for det in dets:
        by_class.setdefault(det.class_id, []).append(det)
    for class_id in sorted(by_class):
        group = sorted(by_class[class_id], key=lambda d: (-d.score, d.anchor_index))
        boxes = np.array([d.box.as_array() for d in group], dtype=np.float64)
        for idx in nms_keep(boxes, iou_threshold):
            survivors.append(group[int(idx)])
    survivors.sort(key=lambda d: (-d.score, d.anchor_index, d.class_id))
    return survivors


def nms_boxes(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Array-level greedy NMS; returns kept row indices, highest score first.

    Ties in score are broken by lower row index (stable sort).
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    keep_local = nms_keep(boxes[order], iou_threshold)
    return order[keep_local]
