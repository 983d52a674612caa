"""Kernel backend selection.

The compiled extension is used when importable; set ``IODCNN_PURE_PYTHON=1``
to force the numpy fallback.  Both backends produce identical results.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("IODCNN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
roi_pool_forward = _impl.roi_pool_forward
roi_pool_backward = _impl.roi_pool_backward


def backends():
    """Map backend name -> kernel module for every backend available here."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels

        out["compiled"] = _kernels
    except ImportError:
        pass
    return out
