"""Kernel backend selection.

The compiled extension is preferred when importable; the numpy fallback is
bit-identical and is used when the extension is missing or when the
``MSCMNET_PURE_PYTHON`` environment variable is set to a non-empty value.
"""

import os

from . import numpy_backend

if os.environ.get("MSCMNET_PURE_PYTHON"):
    backend = numpy_backend
else:
    try:
        from . import _ckernels as backend  # type: ignore[no-redef]
    except ImportError:
        backend = numpy_backend

BACKEND_NAME = backend.NAME

conv_out_size = backend.conv_out_size
im2col = backend.im2col
col2im = backend.col2im
maxpool_forward = backend.maxpool_forward
maxpool_backward = backend.maxpool_backward

__all__ = [
    "BACKEND_NAME",
    "backend",
    "col2im",
    "conv_out_size",
    "im2col",
    "maxpool_backward",
    "maxpool_forward",
    "numpy_backend",
]
