"""Kernel backend selection.

The compiled Cython extension is preferred when present; the pure-numpy
fallback has identical semantics. Set RSALAB_KERNELS=numpy|cython to force
a backend (forcing cython raises if the extension is missing).
"""

import os

from . import numpy_backend

_forced = os.environ.get("RSALAB_KERNELS", "").strip().lower()

if _forced == "numpy":
    _impl = numpy_backend
else:
    try:
        from . import cython_backend as _impl
    except ImportError:
        if _forced == "cython":
            raise
        _impl = numpy_backend


def backend_name() -> str:
    return _impl.NAME


conv_out_extent = numpy_backend.conv_out_extent
conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
