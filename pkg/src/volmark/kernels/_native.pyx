# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled geometry kernels: pairwise 3D IoU and greedy NMS.

Must stay arithmetically identical to ``_fallback.py`` (same expression
order, no FMA contraction) so both backends return bit-equal results.
"""

import numpy as np


cdef inline double _fmax(double a, double b) nogil:
    return a if a > b else b


cdef inline double _fmin(double a, double b) nogil:
    return a if a < b else b


cdef inline double _iou_one(const double* a, const double* b) nogil:
    cdef double lo, hi, ov0, ov1, ov2, inter, va, vb
    lo = _fmax(a[0] - a[3] * 0.5, b[0] - b[3] * 0.5)
    hi = _fmin(a[0] + a[3] * 0.5, b[0] + b[3] * 0.5)
    ov0 = _fmax(hi - lo, 0.0)
    lo = _fmax(a[1] - a[4] * 0.5, b[1] - b[4] * 0.5)
    hi = _fmin(a[1] + a[4] * 0.5, b[1] + b[4] * 0.5)
    ov1 = _fmax(hi - lo, 0.0)
    lo = _fmax(a[2] - a[5] * 0.5, b[2] - b[5] * 0.5)
    hi = _fmin(a[2] + a[5] * 0.5, b[2] + b[5] * 0.5)
    ov2 = _fmax(hi - lo, 0.0)
    inter = (ov0 * ov1) * ov2
    va = (a[3] * a[4]) * a[5]
    vb = (b[3] * b[4]) * b[5]
    return inter / ((va + vb) - inter)


def pairwise_iou_matrix(boxes, others):
    """IoU between every box in `boxes` (N,6) and every box in `others` (M,6)."""
    cdef const double[:, ::1] a = np.ascontiguousarray(boxes, dtype=np.float64)
    cdef const double[:, ::1] b = np.ascontiguousarray(others, dtype=np.float64)
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(n):
            for j in range(m):
                out[i, j] = _iou_one(&a[i, 0], &b[j, 0])
    return out_arr


def nms_keep(boxes, double iou_threshold):
    """Greedy suppression scanning rows in the given order.

    Same contract as the fallback: row i survives iff its IoU with every
    previously kept row is <= `iou_threshold`; returns kept indices int64.
    """
    cdef const double[:, ::1] b = np.ascontiguousarray(boxes, dtype=np.float64)
    cdef Py_ssize_t n = b.shape[0], i, k, nkept = 0
    kept_arr = np.empty(n, dtype=np.int64)
    cdef long long[::1] kept = kept_arr
    cdef bint alive
    with nogil:
        for i in range(n):
            alive = True
            for k in range(nkept):
                if _iou_one(&b[kept[k], 0], &b[i, 0]) > iou_threshold:
                    alive = False
                    break
            if alive:
                kept[nkept] = i
                nkept += 1
    return kept_arr[:nkept].copy()
