"""Convolution kernel backend selection.

The compiled Cython core is preferred when it was built; otherwise the numpy
im2col implementation is used. Set ADAPTERLAB_FORCE_NUMPY=1 to force the
fallback (the benchmark uses this to compare the two).
"""

import os

from . import reference

if os.environ.get("ADAPTERLAB_FORCE_NUMPY"):
    _impl = reference
    BACKEND = "numpy"
else:
    try:
        from . import _corekernels as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = reference
        BACKEND = "numpy"

conv3x3_forward = _impl.conv3x3_forward
conv3x3_backward = _impl.conv3x3_backward

__all__ = ["BACKEND", "conv3x3_forward", "conv3x3_backward", "reference"]
