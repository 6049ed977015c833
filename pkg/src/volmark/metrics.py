"""Detection-quality evaluation: AP, mean IoU, and center distance in mm.

Predictions and ground truth are keyed by volume id. AP uses all-point
precision-recall interpolation with greedy score-ordered matching; each
volume holds at most one ground-truth instance per class. All sorting uses
full tie-breaking (score, then volume id, then anchor index) so results
are deterministic regardless of input order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .assignment import GroundTruth
from .geometry import Box3, Detection, iou3d
from .landmarks import LANDMARK_NAMES, LEFT_EYE, NUM_LANDMARKS, RIGHT_EYE

AP_MEAN_THRESHOLDS = tuple(t / 100.0 for t in range(50, 96, 5))
AP_REPORT_THRESHOLDS = (0.35, 0.50, 0.75)
DEFAULT_SPACING_MM = 1.3

Predictions = Mapping[object, Sequence[Detection]]
GroundTruths = Mapping[object, GroundTruth]


def _volume_order(gts: GroundTruths) -> list:
    return sorted(gts.keys(), key=str)


def _gt_box(gt: GroundTruth, class_id: int) -> Box3:
    return Box3.from_array(gt.boxes[class_id - 1])


def _class_ap(preds: Predictions, gts: GroundTruths, class_id: int, iou_thresh: float) -> float:
    volumes = _volume_order(gts)
    n_gt = len(volumes)
    if n_gt == 0:
        return 0.0
    entries = []
    for vol in volumes:
        for det in preds.get(vol, ()):
            if det.class_id == class_id:
                entries.append((det.score, str(vol), det.anchor_index, vol, det))
    entries.sort(key=lambda e: (-e[0], e[1], e[2]))
    matched = set()
    tp = np.zeros(len(entries))
    fp = np.zeros(len(entries))
    for i, (_, _, _, vol, det) in enumerate(entries):
        if vol not in matched and iou3d(det.box, _gt_box(gts[vol], class_id)) >= iou_thresh:
            tp[i] = 1.0
            matched.add(vol)
        else:
            fp[i] = 1.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    recall = tp_cum / n_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def average_precision(preds: Predictions, gts: GroundTruths, iou_thresh: float) -> float:
    """Mean over the five classes of the per-class AP at one IoU threshold."""
    if not gts:
        return 0.0
    aps = [_class_ap(preds, gts, c, iou_thresh) for c in range(1, NUM_LANDMARKS + 1)]
    return float(np.mean(aps))


def mean_ap(preds: Predictions, gts: GroundTruths) -> float:
    """AP averaged over IoU thresholds 0.50, 0.55, ..., 0.95."""
    return float(np.mean([average_precision(preds, gts, t) for t in AP_MEAN_THRESHOLDS]))


def _best_per_class(dets: Sequence[Detection], class_id: int) -> Detection | None:
    candidates = [d for d in dets if d.class_id == class_id]
    if not candidates:
        return None
    return min(candidates, key=lambda d: (-d.score, d.anchor_index))


def mean_iou(preds: Predictions, gts: GroundTruths) -> float:
    """IoU of the selected box per (volume, class), averaged over volumes
    then over classes; a class with no prediction contributes 0."""
    volumes = _volume_order(gts)
    if not volumes:
        return 0.0
    per_class = []
    for class_id in range(1, NUM_LANDMARKS + 1):
        vals = []
        for vol in volumes:
            best = _best_per_class(preds.get(vol, ()), class_id)
            vals.append(0.0 if best is None else iou3d(best.box, _gt_box(gts[vol], class_id)))
        per_class.append(float(np.mean(vals)))
    return float(np.mean(per_class))


def d_mean(preds: Predictions, gts: GroundTruths, spacing_mm: float = DEFAULT_SPACING_MM) -> float:
    """Mean distance (mm) between selected box centers and GT landmarks.

    Averaged over all (volume, class) pairs that have a prediction; pairs
    without one are excluded here and surface through `miss_rate`. NaN when
    nothing matched at all.
    """
    dists = []
    for vol in _volume_order(gts):
        gt = gts[vol]
        for class_id in range(1, NUM_LANDMARKS + 1):
            best = _best_per_class(preds.get(vol, ()), class_id)
            if best is None:
                continue
            offset = best.center - gt.landmarks[class_id - 1]
            dists.append(float(np.linalg.norm(offset)) * spacing_mm)
    return float(np.mean(dists)) if dists else float("nan")


def miss_rate(preds: Predictions, gts: GroundTruths) -> float:
    """Fraction of (volume, class) pairs with no prediction."""
    volumes = _volume_order(gts)
    total = len(volumes) * NUM_LANDMARKS
    if total == 0:
        return 0.0
    missing = sum(
        1
        for vol in volumes
        for class_id in range(1, NUM_LANDMARKS + 1)
        if _best_per_class(preds.get(vol, ()), class_id) is None
    )
    return missing / total


def eye_swap_rate(preds: Predictions, gts: GroundTruths) -> float:
    """Fraction of volumes whose eye predictions fit better crosswise.

    A volume counts as swapped when reassigning the left-eye prediction to
    the right-eye ground truth (and vice versa) strictly reduces the summed
    center distance. Volumes missing either eye prediction are excluded.
    """
    volumes = _volume_order(gts)
    swapped = 0
    counted = 0
    for vol in volumes:
        dets = preds.get(vol, ())
        left = _best_per_class(dets, LEFT_EYE + 1)
        right = _best_per_class(dets, RIGHT_EYE + 1)
        if left is None or right is None:
            continue
        counted += 1
        gl = gts[vol].landmarks[LEFT_EYE]
        gr = gts[vol].landmarks[RIGHT_EYE]
        straight = np.linalg.norm(left.center - gl) + np.linalg.norm(right.center - gr)
        crossed = np.linalg.norm(left.center - gr) + np.linalg.norm(right.center - gl)
        if crossed < straight:
            swapped += 1
    return swapped / counted if counted else 0.0


@dataclass
class EvalResult:
    """Aggregate metrics plus per-class breakdowns."""

    ap_mean: float
    ap_at: dict[float, float]
    miou: float
    d_mean_mm: float
    miss_rate: float = 0.0
    per_class: dict[str, dict[str, float]] = field(default_factory=dict)
    time_ms: float | None = None

    def to_json_dict(self) -> dict:
        return {
            "ap_mean": self.ap_mean,
            "ap_at": {f"{t:.2f}": v for t, v in self.ap_at.items()},
            "miou": self.miou,
            "d_mean_mm": self.d_mean_mm,
            "miss_rate": self.miss_rate,
            "per_class": self.per_class,
            "time_ms": self.time_ms,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)


def evaluate(
    preds: Predictions,
    gts: GroundTruths,
    spacing_mm: float = DEFAULT_SPACING_MM,
    time_ms: float | None = None,
) -> EvalResult:
    """Compute the full metric set for a prediction run."""
    ap_at = {t: average_precision(preds, gts, t) for t in AP_REPORT_THRESHOLDS}
    per_class = {}
    for class_id, name in enumerate(LANDMARK_NAMES, start=1):
        only = {
            vol: [d for d in preds.get(vol, ()) if d.class_id == class_id]
            for vol in gts
        }
        dists = []
        ious = []
        for vol in _volume_order(gts):
            best = _best_per_class(only.get(vol, ()), class_id)
            if best is not None:
                gt = gts[vol]
                dists.append(float(np.linalg.norm(best.center - gt.landmarks[class_id - 1])) * spacing_mm)
                ious.append(iou3d(best.box, _gt_box(gt, class_id)))
            else:
                ious.append(0.0)
        per_class[name] = {
            "ap50": _class_ap(preds, gts, class_id, 0.50),
            "iou": float(np.mean(ious)) if ious else 0.0,
            "d_mm": float(np.mean(dists)) if dists else float("nan"),
        }
    return EvalResult(
        ap_mean=mean_ap(preds, gts),
        ap_at=ap_at,
        miou=mean_iou(preds, gts),
        d_mean_mm=d_mean(preds, gts, spacing_mm),
        miss_rate=miss_rate(preds, gts),
        per_class=per_class,
        time_ms=time_ms,
    )


TABLE_COLUMNS = ("AP", "AP35", "AP50", "AP75", "mIoU", "d-mean", "time-ms")


def format_table(rows: Sequence[tuple[str, EvalResult]]) -> str:
    """Aligned text table, one row per labeled result."""
    label_width = max([len("method")] + [len(label) for label, _ in rows])
    header = f"{'method':<{label_width}}  " + "  ".join(f"{c:>7}" for c in TABLE_COLUMNS)
    lines = [header]
    for label, res in rows:
        cells = [
            f"{res.ap_mean:7.4f}",
            f"{res.ap_at.get(0.35, float('nan')):7.4f}",
            f"{res.ap_at.get(0.50, float('nan')):7.4f}",
            f"{res.ap_at.get(0.75, float('nan')):7.4f}",
            f"{res.miou:7.4f}",
            f"{res.d_mean_mm:7.2f}",
            f"{res.time_ms:7.1f}" if res.time_ms is not None else f"{'-':>7}",
        ]
        lines.append(f"{label:<{label_width}}  " + "  ".join(cells))
    return "\n".join(lines)
