"""Inner-loop kernels for convolution and max pooling.

Two interchangeable implementations exist: a numba ``@njit`` fast path and a
pure-numpy fallback (im2col + BLAS). The active one is chosen once at import
time from the ``ADVDA_BACKEND`` environment variable:

    ADVDA_BACKEND=numba   force the numba kernels (error if numba is missing)
    ADVDA_BACKEND=numpy   force the numpy kernels
    unset                 numba when importable, numpy otherwise

Both backends are deterministic and agree to float64 round-off, but they sum
in different orders, so results are not bit-identical across backends. Runs
that must be reproduced bit-exactly record which backend they used (see the
resolved-config snapshot written by the CLI).

Kernel contracts (all arrays are C-contiguous float64):

    conv2d_forward(x, w, stride) -> y
        x (n, ci, h, w), w (co, ci, kh, kw); 'valid' convolution, any padding
        is applied by the caller. y (n, co, oh, ow).
    conv2d_backward(x, w, g, stride) -> (gx, gw)
        gradients of sum(g * y) with respect to x and w.
    maxpool_forward(x, ph, pw, stride) -> (y, ay, ax)
        ay/ax hold the absolute row/col index of each window's max; ties go
        to the first element in row-major window order.
    maxpool_backward(g, ay, ax, h, w) -> gx
"""

import os

__all__ = [
    "BACKEND",
    "conv2d_forward",
    "conv2d_backward",
    "maxpool_forward",
    "maxpool_backward",
]

_CHOICES = ("numba", "numpy")


def _load(name):
    if name == "numba":
        from advda.kernels import numba_impl as impl
    else:
        from advda.kernels import numpy_impl as impl
    return impl


_requested = os.environ.get("ADVDA_BACKEND", "").strip().lower()
if _requested and _requested not in _CHOICES:
    raise ValueError(
        f"ADVDA_BACKEND={_requested!r} is not one of {_CHOICES}"
    )

if _requested:
    _impl = _load(_requested)
    BACKEND = _requested
else:
    try:
        _impl = _load("numba")
        BACKEND = "numba"
    except ImportError:
        _impl = _load("numpy")
        BACKEND = "numpy"

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
