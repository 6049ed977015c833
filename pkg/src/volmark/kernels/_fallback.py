"""Pure-numpy implementations of the hot geometry kernels.

These mirror the compiled kernels in ``_native.pyx`` operation-for-operation:
the arithmetic is written in the same order so both backends (and the scalar
reference in ``volmark.geometry``) produce bit-identical results.
"""

import numpy as np


def pairwise_iou_matrix(boxes: np.ndarray, others: np.ndarray) -> np.ndarray:
    """IoU between every box in `boxes` (N,6) and every box in `others` (M,6).

    Boxes are (cx, cy, cz, w, h, d); each spans [c - s/2, c + s/2) per axis.
    Returns an (N, M) float64 matrix.
    """
    a = np.ascontiguousarray(boxes, dtype=np.float64)
    b = np.ascontiguousarray(others, dtype=np.float64)
    a_lo = a[:, None, :3] - a[:, None, 3:] * 0.5
    a_hi = a[:, None, :3] + a[:, None, 3:] * 0.5
    b_lo = b[None, :, :3] - b[None, :, 3:] * 0.5
    b_hi = b[None, :, :3] + b[None, :, 3:] * 0.5
    ov = np.maximum(np.minimum(a_hi, b_hi) - np.maximum(a_lo, b_lo), 0.0)
    inter = (ov[..., 0] * ov[..., 1]) * ov[..., 2]
    va = ((a[:, 3] * a[:, 4]) * a[:, 5])[:, None]
    vb = ((b[:, 3] * b[:, 4]) * b[:, 5])[None, :]
    return inter / ((va + vb) - inter)


def nms_keep(boxes: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy suppression scanning rows in the given order.

    Row i survives iff its IoU with every previously kept row is
    <= `iou_threshold`. The caller is responsible for ordering rows
    (descending score with deterministic tie-breaks). Returns the kept
    row indices in scan order as int64.
    """
    b = np.ascontiguousarray(boxes, dtype=np.float64)
    n = b.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.int64)
    lo = b[:, :3] - b[:, 3:] * 0.5
    hi = b[:, :3] + b[:, 3:] * 0.5
    vol = (b[:, 3] * b[:, 4]) * b[:, 5]
    suppressed = np.zeros(n, dtype=bool)
    keep = []
    for i in range(n):
        if suppressed[i]:
            continue
        keep.append(i)
        rest = np.nonzero(~suppressed[i + 1 :])[0] + (i + 1)
        if rest.size == 0:
            continue
        ov = np.maximum(
            np.minimum(hi[i], hi[rest]) - np.maximum(lo[i], lo[rest]), 0.0
        )
        inter = (ov[:, 0] * ov[:, 1]) * ov[:, 2]
        iou = inter / ((vol[i] + vol[rest]) - inter)
        suppressed[rest[iou > iou_threshold]] = True
    return np.asarray(keep, dtype=np.int64)
