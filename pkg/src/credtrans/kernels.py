"""Kernel backend selection.

The compiled ``_ckernels`` module is used when it was built; otherwise the
NumPy implementation in ``_pykernels`` is used.  Set ``CREDTRANS_PURE_PYTHON=1``
to force the fallback.
"""

import os

if os.environ.get("CREDTRANS_PURE_PYTHON", "") not in ("", "0"):
    from . import _pykernels as _impl

    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        from . import _pykernels as _impl

        BACKEND = "python"

softmax_forward = _impl.softmax_forward
softmax_backward = _impl.softmax_backward
layer_norm_forward = _impl.layer_norm_forward
layer_norm_backward = _impl.layer_norm_backward
gelu_forward = _impl.gelu_forward
gelu_backward = _impl.gelu_backward
ple_forward = _impl.ple_forward
ple_backward = _impl.ple_backward

__all__ = [
    "BACKEND",
    "softmax_forward",
    "softmax_backward",
    "layer_norm_forward",
    "layer_norm_backward",
    "gelu_forward",
    "gelu_backward",
    "ple_forward",
    "ple_backward",
]
