"""End-to-end detection pipeline over per-cell features.

The feature extractor produces a descriptor per anchor-grid cell; two
per-cell linear heads (equivalent to 1x1x1 convolutions) predict class
logits and box deltas for every anchor slot. Training runs plain SGD on the
IoU-weighted classification loss plus smooth-L1 regression; inference
decodes all anchors, suppresses duplicates per class, keeps the top
candidates, and lets the distance-ratio prior pick the final combination.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy import ndimage

from .assignment import match_anchors
from .geometry import (
    AnchorGrid,
    AnchorSpec,
    Box3,
    Detection,
    decode_boxes,
    generate_anchors,
    iou_aligned,
    nms_boxes,
)
from .landmarks import LANDMARK_NAMES, NUM_LANDMARKS, class_name, derive_seed
from .losses import smooth_l1, softmax, weighted_cls_loss_arrays
from .phantom import PhantomVolume
from .prior import CandidateSet, DetectionFailureError, PriorModel, select_combination


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"training loss non-finite at step {step}: {loss}")
        self.step = step


class FeatureExtractor(Protocol):
    """Per-cell volume descriptor aligned with the anchor grid."""

    feature_dim: int
    stride: int

    def extract(self, voxels: np.ndarray) -> np.ndarray:
        """(nx, ny, nz) volume -> (nx//s, ny//s, nz//s, feature_dim)."""
        ...


@dataclass
class ReferenceExtractor:
    """Deterministic multi-scale local statistics.

    Per cell: mean, variance, min, max of intensity over cubic windows of
    4, 8, and 16 voxels centered on the cell, plus the three axis gradients
    of the mid-scale mean field. Variance and gradient channels are scaled
    by fixed constants so all features live on comparable magnitudes.
    """

    stride: int = 4
    windows: tuple[int, ...] = (4, 8, 16)
    gradient_window: int = 8
    var_scale: float = 20.0
    grad_scale: float = 10.0

    @property
    def feature_dim(self) -> int:
        return 4 * len(self.windows) + 3

    def extract(self, voxels: np.ndarray) -> np.ndarray:
        vol = np.asarray(voxels, dtype=np.float64)
        s = self.stride
        grid_dims = tuple(n // s for n in vol.shape)
        if any(g < 1 for g in grid_dims):
            raise ValueError(f"volume {vol.shape} smaller than stride {s}")
        centers = [np.arange(g) * s + s // 2 for g in grid_dims]
        ix, iy, iz = np.ix_(*centers)

        feats = np.empty(grid_dims + (self.feature_dim,), dtype=np.float64)
        grad_field = None
        for wi, w in enumerate(self.windows):
            mean = ndimage.uniform_filter(vol, size=w, mode="nearest")
            sq = ndimage.uniform_filter(vol * vol, size=w, mode="nearest")
            var = np.maximum(sq - mean * mean, 0.0)
            feats[..., 4 * wi + 0] = mean[ix, iy, iz]
            feats[..., 4 * wi + 1] = var[ix, iy, iz] * self.var_scale
            feats[..., 4 * wi + 2] = ndimage.minimum_filter(vol, size=w, mode="nearest")[ix, iy, iz]
            feats[..., 4 * wi + 3] = ndimage.maximum_filter(vol, size=w, mode="nearest")[ix, iy, iz]
            if w == self.gradient_window:
                grad_field = mean
        if grad_field is None:
            grad_field = ndimage.uniform_filter(vol, size=self.gradient_window, mode="nearest")
        # axis gradients of the smoothed field, one stride apart
        for axis in range(3):
            hi = [c.copy() for c in centers]
            lo = [c.copy() for c in centers]
            hi[axis] = np.minimum(hi[axis] + s, vol.shape[axis] - 1)
            lo[axis] = np.maximum(lo[axis] - s, 0)
            g = (grad_field[np.ix_(*hi)] - grad_field[np.ix_(*lo)]) / (2.0 * s)
            feats[..., 4 * len(self.windows) + axis] = g * self.grad_scale
        return feats


def flatten_cells(features: np.ndarray) -> np.ndarray:
    """(gx, gy, gz, F) -> (n_cells, F) in the anchor grid's z-major order."""
    return features.transpose(2, 1, 0, 3).reshape(-1, features.shape[-1])


@dataclass
class HeadParams:
    """Per-cell linear head weights, stored float32.

    The per-cell classification output is the concatenation over anchor
    slots of (num_classes) logits; regression is the concatenation of 6
    deltas per slot. Serialization is exact (float32 payloads round-trip
    bit-for-bit).
    """

    cls_w: np.ndarray  # (F, A * C)
    cls_b: np.ndarray  # (A * C,)
    reg_w: np.ndarray  # (F, A * 6)
    reg_b: np.ndarray  # (A * 6,)
    anchors_per_cell: int
    num_classes: int  # C = foreground classes + background

    def __post_init__(self):
        for name in ("cls_w", "cls_b", "reg_w", "reg_b"):
            arr = np.asarray(getattr(self, name), dtype=np.float32)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
            setattr(self, name, arr)
        a, c = self.anchors_per_cell, self.num_classes
        f = self.cls_w.shape[0]
        expected = {
            "cls_w": (f, a * c),
            "cls_b": (a * c,),
            "reg_w": (f, a * 6),
            "reg_b": (a * 6,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} shape {getattr(self, name).shape} != {shape}")

    @property
    def feature_dim(self) -> int:
        return self.cls_w.shape[0]

    @classmethod
    def init(
        cls,
        feature_dim: int,
        anchors_per_cell: int,
        num_classes: int = NUM_LANDMARKS + 1,
        seed: int = 0,
        scale: float = 0.01,
    ) -> "HeadParams":
        rng = np.random.default_rng(seed)
        return cls(
            cls_w=rng.standard_normal((feature_dim, anchors_per_cell * num_classes)) * scale,
            cls_b=np.zeros(anchors_per_cell * num_classes),
            reg_w=rng.standard_normal((feature_dim, anchors_per_cell * 6)) * scale,
            reg_b=np.zeros(anchors_per_cell * 6),
            anchors_per_cell=anchors_per_cell,
            num_classes=num_classes,
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "cls_w": self.cls_w,
            "cls_b": self.cls_b,
            "reg_w": self.reg_w,
            "reg_b": self.reg_b,
        }

    def save(self, path) -> None:
        doc = {
            "feature_dim": int(self.feature_dim),
            "anchors_per_cell": int(self.anchors_per_cell),
            "num_classes": int(self.num_classes),
            "arrays": {
                name: {
                    "shape": list(arr.shape),
                    "data": base64.b64encode(arr.astype("<f4").tobytes()).decode("ascii"),
                }
                for name, arr in self.arrays().items()
            },
        }
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "HeadParams":
        doc = json.loads(Path(path).read_text())
        arrays = {}
        for name, entry in doc["arrays"].items():
            data = np.frombuffer(base64.b64decode(entry["data"]), dtype="<f4")
            arrays[name] = data.reshape(entry["shape"]).copy()
        return cls(
            anchors_per_cell=int(doc["anchors_per_cell"]),
            num_classes=int(doc["num_classes"]),
            **arrays,
        )


def forward_cells(cell_features: np.ndarray, params: HeadParams) -> tuple[np.ndarray, np.ndarray]:
    """Head outputs over flattened cells: per-anchor (probs, deltas)."""
    if cell_features.shape[1] != params.feature_dim:
        raise ValueError(
            f"feature dim {cell_features.shape[1]} != head dim {params.feature_dim}"
        )
    feats = np.asarray(cell_features, dtype=np.float64)
    c = params.num_classes
    logits = feats @ params.cls_w.astype(np.float64) + params.cls_b.astype(np.float64)
    deltas = feats @ params.reg_w.astype(np.float64) + params.reg_b.astype(np.float64)
    probs = softmax(logits.reshape(-1, c))
    return probs, deltas.reshape(-1, 6)


def forward(
    volume: PhantomVolume,
    extractor: FeatureExtractor,
    params: HeadParams,
    spec: AnchorSpec | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-anchor class probabilities and deltas for a volume."""
    spec = spec or AnchorSpec(stride=extractor.stride)
    if extractor.stride != spec.stride:
        raise ValueError(f"extractor stride {extractor.stride} != anchor stride {spec.stride}")
    if spec.anchors_per_cell != params.anchors_per_cell:
        raise ValueError("anchor spec and head params disagree on anchors per cell")
    features = extractor.extract(volume.voxels)
    return forward_cells(flatten_cells(features), params)


@dataclass
class TrainConfig:
    steps: int = 2000
    optimizer: str = "adam"  # or "sgd"
    learning_rate: float = 0.02
    lr_decay: float = 0.9  # fraction of the rate linearly shed by the last step
    average_tail: float = 0.25  # final params = mean over this trailing share of steps
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    iou_balance: bool = True
    iou_exponent: float = 1.75
    seed: int = 0
    neg_ratio: int = 3
    neg_cap: int = 256
    near_negative_fraction: float = 0.5
    reg_weight: float = 1.0
    init_scale: float = 0.01
    pos_iou: float = 0.5
    neg_iou: float = 0.25


@dataclass
class VolumeCache:
    """Precomputed per-volume training data (features and assignment)."""

    cell_features: np.ndarray  # (n_cells, F) float32
    pos_indices: np.ndarray  # (P,) anchor indices
    pos_labels: np.ndarray  # (P,) class ids 1..K
    pos_anchor_boxes: np.ndarray  # (P, 6)
    pos_targets: np.ndarray  # (P, 6) encoded deltas
    pos_gt_boxes: np.ndarray  # (P, 6) matched GT boxes
    excluded: np.ndarray  # sorted anchor indices that are not negatives
    near_negatives: np.ndarray  # negative anchors close to some landmark
    n_anchors: int
    slots_per_cell: int


NEAR_NEGATIVE_SHELL = (3.0, 11.0)


def build_cache(
    volume: PhantomVolume,
    extractor: FeatureExtractor,
    spec: AnchorSpec,
    pos_iou: float = 0.5,
    neg_iou: float = 0.25,
) -> VolumeCache:
    grid = generate_anchors(spec, volume.dims)
    features = flatten_cells(extractor.extract(volume.voxels)).astype(np.float32)
    assign = match_anchors(grid, volume.gt, pos_iou=pos_iou, neg_iou=neg_iou)
    pos = assign.positive_indices
    not_negative = np.nonzero(assign.state != -1)[0].astype(np.int64)
    centers = grid.boxes[:, :3]
    dist = np.full(grid.n_anchors, np.inf)
    for point in volume.gt.landmarks:
        dist = np.minimum(dist, np.linalg.norm(centers - point, axis=1))
    near = (dist > NEAR_NEGATIVE_SHELL[0]) & (dist <= NEAR_NEGATIVE_SHELL[1])
    near &= assign.state == -1
    return VolumeCache(
        cell_features=features,
        pos_indices=pos,
        pos_labels=assign.class_id[pos].astype(np.int64),
        pos_anchor_boxes=grid.boxes[pos],
        pos_targets=assign.regression_targets,
        pos_gt_boxes=volume.gt.boxes[assign.matched_gt[pos]],
        excluded=np.sort(not_negative),
        near_negatives=np.nonzero(near)[0].astype(np.int64),
        n_anchors=grid.n_anchors,
        slots_per_cell=spec.anchors_per_cell,
    )


def _gather_logits(
    cache: VolumeCache, params: HeadParams, indices: np.ndarray, head: str
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Logits (or raw deltas) for a set of anchors plus gather metadata."""
    a = params.anchors_per_cell
    width = params.num_classes if head == "cls" else 6
    w = (params.cls_w if head == "cls" else params.reg_w).astype(np.float64)
    b = (params.cls_b if head == "cls" else params.reg_b).astype(np.float64)
    cells = indices // a
    slots = indices % a
    feats = cache.cell_features[cells].astype(np.float64)
    w3 = w.reshape(params.feature_dim, a, width)
    out = np.einsum("nf,fnw->nw", feats, w3[:, slots, :]) + b.reshape(a, width)[slots]
    return out, feats, slots


def _scatter_grads(
    d_out: np.ndarray, feats: np.ndarray, slots: np.ndarray, params: HeadParams, head: str
) -> tuple[np.ndarray, np.ndarray]:
    """Accumulate per-anchor logit gradients into weight/bias gradients."""
    a = params.anchors_per_cell
    width = d_out.shape[1]
    dw = np.zeros((a, params.feature_dim, width))
    db = np.zeros((a, width))
    np.add.at(dw, slots, feats[:, :, None] * d_out[:, None, :])
    np.add.at(db, slots, d_out)
    return dw.transpose(1, 0, 2).reshape(params.feature_dim, a * width), db.reshape(a * width)


def step_loss_and_grads(
    cache: VolumeCache,
    params: HeadParams,
    neg_indices: np.ndarray,
    config: TrainConfig,
    weights_override: np.ndarray | None = None,
):
    """Loss and analytic parameter gradients for one volume step.

    The positive-sample weights are recomputed from the current decoded
    boxes unless `weights_override` pins them; gradients always treat the
    weights as constants.
    """
    pos_logits, pos_feats, pos_slots = _gather_logits(cache, params, cache.pos_indices, "cls")
    neg_logits, neg_feats, neg_slots = _gather_logits(cache, params, neg_indices, "cls")
    pred_deltas, reg_feats, reg_slots = _gather_logits(cache, params, cache.pos_indices, "reg")

    if weights_override is None and not config.iou_balance:
        weights_override = np.ones(len(cache.pos_indices))
    if weights_override is None:
        decoded = decode_boxes(cache.pos_anchor_boxes, pred_deltas)
        ious = iou_aligned(decoded, cache.pos_gt_boxes)
    else:
        ious = np.zeros(len(cache.pos_indices))
    cls_loss, weights, d_pos, d_neg = weighted_cls_loss_arrays(
        pos_logits,
        cache.pos_labels,
        ious,
        neg_logits,
        exponent=config.iou_exponent,
        weights_override=weights_override,
    )

    reg_raw, d_deltas = smooth_l1(pred_deltas - cache.pos_targets)
    reg_loss = config.reg_weight * reg_raw
    d_deltas = d_deltas * config.reg_weight

    dw_cls_p, db_cls_p = _scatter_grads(d_pos, pos_feats, pos_slots, params, "cls")
    dw_cls_n, db_cls_n = _scatter_grads(d_neg, neg_feats, neg_slots, params, "cls")
    dw_reg, db_reg = _scatter_grads(d_deltas, reg_feats, reg_slots, params, "reg")

    grads = {
        "cls_w": dw_cls_p + dw_cls_n,
        "cls_b": db_cls_p + db_cls_n,
        "reg_w": dw_reg,
        "reg_b": db_reg,
    }
    return cls_loss, reg_loss, grads, weights


def _sample_negatives(rng: np.random.Generator, cache: VolumeCache, config: TrainConfig) -> np.ndarray:
    """Stratified random negatives.

    A share is drawn from the shell of anchors around the landmarks (where
    class confusions live, but which uniform sampling essentially never
    visits); each shell draw also pulls sibling anchor slots at the same
    cell so every per-slot classifier sees the confusable cells. The rest
    is uniform over all negatives.
    """
    a = cache.slots_per_cell
    count = min(config.neg_cap, config.neg_ratio * max(len(cache.pos_indices), 1))
    n_near = min(int(count * config.near_negative_fraction), len(cache.near_negatives))
    picked: list[int] = []
    if n_near:
        seeds = cache.near_negatives[rng.integers(0, len(cache.near_negatives), size=(n_near + 3) // 4)]
        group: list[int] = []
        for anchor in seeds:
            cell_base = int(anchor) - int(anchor) % a
            group.append(int(anchor))
            group.extend(cell_base + int(s) for s in rng.integers(0, a, size=3))
        group_arr = np.asarray(group, dtype=np.int64)
        keep = ~np.isin(group_arr, cache.excluded)
        picked.extend(int(v) for v in group_arr[keep][:n_near])
    while len(picked) < count:
        draw = rng.integers(0, cache.n_anchors, size=2 * count)
        mask = ~np.isin(draw, cache.excluded)
        picked.extend(int(v) for v in draw[mask])
    return np.asarray(picked[:count], dtype=np.int64)


def train(
    volumes: Sequence[PhantomVolume],
    extractor: FeatureExtractor,
    config: TrainConfig | None = None,
    spec: AnchorSpec | None = None,
) -> tuple[HeadParams, list[dict]]:
    """SGD over one random volume per step; deterministic given the seed."""
    config = config or TrainConfig()
    spec = spec or AnchorSpec(stride=extractor.stride)
    if not volumes:
        raise ValueError("training set is empty")
    params = HeadParams.init(
        extractor.feature_dim,
        spec.anchors_per_cell,
        seed=derive_seed(config.seed, "init"),
        scale=config.init_scale,
    )
    if config.optimizer not in ("adam", "sgd"):
        raise ValueError(f"unknown optimizer {config.optimizer!r}")
    rng = np.random.default_rng(derive_seed(config.seed, "train"))
    caches: dict[int, VolumeCache] = {}
    curve = []
    tail_start = config.steps - max(int(config.steps * config.average_tail), 1)
    tail_sum: dict[str, np.ndarray] | None = None
    tail_count = 0
    moment1 = {k: np.zeros(v.shape) for k, v in params.arrays().items()}
    moment2 = {k: np.zeros(v.shape) for k, v in params.arrays().items()}
    for step in range(config.steps):
        # decaying rate lets the stochastic updates settle
        lr = config.learning_rate * (1.0 - config.lr_decay * step / max(config.steps, 1))
        vol_idx = int(rng.integers(0, len(volumes)))
        if vol_idx not in caches:
            caches[vol_idx] = build_cache(
                volumes[vol_idx], extractor, spec, config.pos_iou, config.neg_iou
            )
        cache = caches[vol_idx]
        neg = _sample_negatives(rng, cache, config)
        cls_loss, reg_loss, grads, _ = step_loss_and_grads(cache, params, neg, config)
        total = cls_loss + reg_loss
        if not math.isfinite(total):
            raise TrainingDivergedError(step, total)
        if lr != 0.0:
            # the losses are sums over samples; step on per-sample means so
            # the learning rate is independent of the sample counts
            n_pos = len(cache.pos_indices)
            scale = {"cls": 1.0 / max(n_pos + len(neg), 1), "reg": 1.0 / max(n_pos, 1)}
            for name, grad in grads.items():
                g = scale[name[:3]] * grad
                arr = getattr(params, name).astype(np.float64)
                if config.optimizer == "adam":
                    m = moment1[name]
                    v = moment2[name]
                    m *= config.adam_beta1
                    m += (1.0 - config.adam_beta1) * g
                    v *= config.adam_beta2
                    v += (1.0 - config.adam_beta2) * g * g
                    m_hat = m / (1.0 - config.adam_beta1 ** (step + 1))
                    v_hat = v / (1.0 - config.adam_beta2 ** (step + 1))
                    update = m_hat / (np.sqrt(v_hat) + config.adam_eps)
                else:
                    update = g
                setattr(params, name, (arr - lr * update).astype(np.float32))
        if step >= tail_start and config.learning_rate != 0.0:
            # tail-averaged iterates damp the optimizer noise in the final model
            if tail_sum is None:
                tail_sum = {k: v.astype(np.float64) for k, v in params.arrays().items()}
            else:
                for k, v in params.arrays().items():
                    tail_sum[k] += v
            tail_count += 1
        curve.append({"step": step, "cls": cls_loss, "reg": reg_loss, "total": total})
    if tail_sum is not None:
        for k, v in tail_sum.items():
            setattr(params, k, (v / tail_count).astype(np.float32))
    return params, curve


@dataclass
class InferConfig:
    nms_iou: float = 0.1
    topk: int = 2
    max_pool_per_class: int = 20000  # score cutoff before NMS, bounds worst-case cost


def candidates_per_class(
    volume: PhantomVolume,
    extractor: FeatureExtractor,
    params: HeadParams,
    config: InferConfig | None = None,
    spec: AnchorSpec | None = None,
) -> list[list[Detection]]:
    """Top-k score-ordered, NMS-deduplicated detections for each class.

    Anchors whose argmax class is background are dropped from the pool.
    Raises DetectionFailureError naming the first class with no survivors.
    """
    config = config or InferConfig()
    spec = spec or AnchorSpec(stride=extractor.stride)
    grid = generate_anchors(spec, volume.dims)
    probs, deltas = forward(volume, extractor, params, spec)
    decoded = decode_boxes(grid.boxes, deltas)
    pool = np.nonzero(np.argmax(probs, axis=1) != 0)[0]
    if pool.size == 0:
        raise DetectionFailureError(f"no candidates for class {class_name(1)!r}")
    out: list[list[Detection]] = []
    for class_id in range(1, NUM_LANDMARKS + 1):
        scores = probs[pool, class_id]
        sub = pool
        if sub.size > config.max_pool_per_class:
            top = np.argpartition(-scores, config.max_pool_per_class)[: config.max_pool_per_class]
            sub = pool[top]
            scores = probs[sub, class_id]
        keep = nms_boxes(decoded[sub], scores, config.nms_iou)[: config.topk]
        dets = [
            Detection(
                box=Box3.from_array(decoded[sub[k]]),
                class_id=class_id,
                score=float(probs[sub[k], class_id]),
                anchor_index=int(sub[k]),
            )
            for k in keep
        ]
        if not dets:
            raise DetectionFailureError(f"no candidates for class {class_name(class_id)!r}")
        out.append(dets)
    return out


def infer(
    volume: PhantomVolume,
    extractor: FeatureExtractor,
    params: HeadParams,
    prior: PriorModel | None = None,
    config: InferConfig | None = None,
    spec: AnchorSpec | None = None,
) -> list[Detection]:
    """Final per-class detections, one per landmark, ordered by class id.

    With a prior the top-k candidate combinations are filtered by penalty;
    without one the per-class score argmax wins directly.
    """
    config = config or InferConfig()
    cands = candidates_per_class(volume, extractor, params, config, spec)
    if prior is None:
        return [dets[0] for dets in cands]
    return select_combination(CandidateSet.build(cands, k=config.topk), prior)


def detections_to_json(dets: Sequence[Detection], spacing_mm: float) -> list[dict]:
    """Wire format: class name, box, score, and landmark position in mm."""
    return [
        {
            "class": LANDMARK_NAMES[d.class_id - 1],
            "box": [float(v) for v in d.box.as_array()],
            "score": d.score,
            "landmark_mm": [float(v * spacing_mm) for v in d.center],
        }
        for d in dets
    ]


def landmarks_from_detections(dets: Sequence[Detection]) -> np.ndarray:
    """(5, 3) center coordinates in class order."""
    ordered = sorted(dets, key=lambda d: d.class_id)
    return np.array([d.center for d in ordered])
