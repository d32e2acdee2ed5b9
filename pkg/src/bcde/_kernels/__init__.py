"""Elementwise numerical kernels behind the tensor primitives.

The compiled Cython module is used when it has been built; otherwise the
numpy implementation is selected. Setting ``BCDE_PURE_PYTHON=1`` forces the
numpy path.
"""

import os

from . import _fallback

fallback = _fallback

if os.environ.get("BCDE_PURE_PYTHON", "") not in ("", "0"):
    impl = _fallback
else:
    try:
        from . import _ckernels as impl
    except ImportError:
        impl = _fallback

BACKEND = impl.BACKEND

softplus = impl.softplus
sigmoid = impl.sigmoid
relu = impl.relu
relu_backward = impl.relu_backward
softplus_backward = impl.softplus_backward
sigmoid_backward = impl.sigmoid_backward
tanh_backward = impl.tanh_backward
logmeanexp = impl.logmeanexp

__all__ = [
    "BACKEND",
    "fallback",
    "impl",
    "logmeanexp",
    "relu",
    "relu_backward",
    "sigmoid",
    "sigmoid_backward",
    "softplus",
    "softplus_backward",
    "tanh_backward",
]
