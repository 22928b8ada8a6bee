"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy versions.
Setting ``IMSEG_PURE_PYTHON=1`` forces the fallback.
"""
import os

from . import _kernels_py


def _load():
    if os.environ.get("IMSEG_PURE_PYTHON", "") not in ("", "0"):
        return _kernels_py, "python"
    try:
        from . import _ckernels
    except ImportError:
        return _kernels_py, "python"
    return _ckernels, "compiled"


_impl, BACKEND = _load()

conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_weight = _impl.conv2d_backward_weight
maxpool2x2_forward = _impl.maxpool2x2_forward
maxpool2x2_backward = _impl.maxpool2x2_backward
box_sum_valid = _impl.box_sum_valid
box_sum_adjoint = _impl.box_sum_adjoint


def backends():
    """Mapping of every importable backend name to its module."""
    found = {"python": _kernels_py}
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        found["compiled"] = _ckernels
    return found
