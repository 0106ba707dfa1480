"""Kernel backend dispatch.

The numba backend is the default; set DEEPBOW_DISABLE_NUMBA=1 (or run without
numba installed) to fall back to pure numpy. Both backends implement the same
update sequences; within a backend every kernel is bitwise deterministic.
"""

import os

from .common import (
    assign_nearest_gemm,
    gram_rbf,
    maxpool2,
    maxpool2_backward,
    relu,
    relu_backward,
    upsample2,
    upsample2_backward,
)

if os.environ.get("DEEPBOW_DISABLE_NUMBA", "") == "1":
    from . import _numpy_impl as _impl
    BACKEND = "numpy"
else:
    try:
        from . import _numba_impl as _impl
        BACKEND = "numba"
    except ImportError:
        from . import _numpy_impl as _impl
        BACKEND = "numpy"

conv3x3_forward = _impl.conv3x3_forward
conv3x3_backward_input = _impl.conv3x3_backward_input
conv3x3_backward_params = _impl.conv3x3_backward_params
assign_nearest_loop = _impl.assign_nearest_loop
smo_solve = _impl.smo_solve
select_sweep = _impl.select_sweep

__all__ = [
    "BACKEND",
    "assign_nearest_gemm",
    "assign_nearest_loop",
    "conv3x3_backward_input",
    "conv3x3_backward_params",
    "conv3x3_forward",
    "gram_rbf",
    "maxpool2",
    "maxpool2_backward",
    "relu",
    "relu_backward",
    "select_sweep",
    "smo_solve",
    "upsample2",
    "upsample2_backward",
]
