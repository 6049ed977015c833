"""Hot geometry kernels: compiled extension with a pure-numpy fallback.

The Cython extension ``_native`` is built at install time when a C toolchain
is available. Import falls back to the numpy implementation transparently;
set ``VOLMARK_PURE_PYTHON=1`` to force the fallback. Both backends are
bit-for-bit equivalent (see ``benchmarks/bench_kernels.py`` for the speed
comparison).
"""

import os

from . import _fallback

if os.environ.get("VOLMARK_PURE_PYTHON", "").strip() not in ("", "0"):
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _native as _impl  # type: ignore[no-redef]

        BACKEND = "native"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"

pairwise_iou_matrix = _impl.pairwise_iou_matrix
nms_keep = _impl.nms_keep


def backend_name() -> str:
    """Name of the active kernel backend: "native" or "python"."""
    return BACKEND


__all__ = ["pairwise_iou_matrix", "nms_keep", "backend_name", "BACKEND"]
