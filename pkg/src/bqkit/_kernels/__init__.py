"""Kernel backend selection.

The compiled Cython core is preferred when importable; setting
BQKIT_FORCE_FALLBACK=1 pins the pure-numpy implementation. Both backends
implement the same contracts (see fallback.py) and agree to float64
round-off; results are deterministic within a backend.
"""

import os

from . import fallback

if os.environ.get("BQKIT_FORCE_FALLBACK"):
    _impl = fallback
    BACKEND = "numpy"
else:
    try:
        from . import _core as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = fallback
        BACKEND = "numpy"

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
kmeans_assign = _impl.kmeans_assign
