"""Convolution / pooling compute kernels with two interchangeable backends.

The hot inner loops (dense 2-D cross-correlation and max pooling, forward
and backward) exist twice:

  * ``numba``: @njit loop kernels (default when numba imports cleanly)
  * ``numpy``: vectorized im2col / col2im implementations

Select with the environment variable ``DUOFORMER_BACKEND`` set to ``numba``,
``numpy``, or ``auto`` (the default). Both backends produce results equal to
well under 1e-12 and share the same argmax tie rule (first element in
row-major window order), so the choice never affects test outcomes.

``benchmarks/bench_kernels.py`` compares the two.
"""

from __future__ import annotations

import os

# TBB probing is noisy on machines with an old libtbb; the workqueue layer
# behaves identically for these kernels.
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

_REQUESTED = os.environ.get("DUOFORMER_BACKEND", "auto").lower()

if _REQUESTED not in ("auto", "numba", "numpy"):
    raise ValueError(
        f"DUOFORMER_BACKEND must be 'auto', 'numba', or 'numpy', got {_REQUESTED!r}"
    )

if _REQUESTED == "numpy":
    from . import numpy_impl as _impl

    _BACKEND = "numpy"
else:
    try:
        from . import numba_impl as _impl

        _BACKEND = "numba"
    except ImportError:
        if _REQUESTED == "numba":
            raise
        from . import numpy_impl as _impl

        _BACKEND = "numpy"


def backend_name() -> str:
    return _BACKEND


def conv2d_forward(x, w, stride: int, padding: int):
    """x [n,c,h,w] (+) w [co,c,kh,kw] -> [n,co,oh,ow], cross-correlation."""
    return _impl.conv2d_forward(x, w, stride, padding)


def conv2d_backward(x, w, grad, stride: int, padding: int):
    """Returns (dx, dw) for conv2d_forward."""
    return _impl.conv2d_backward(x, w, grad, stride, padding)


def maxpool2d_forward(x, kernel: int, stride: int):
    """Returns (out, argmax) where argmax holds the flat in-window index
    (row-major, first occurrence wins ties) of each window maximum."""
    return _impl.maxpool2d_forward(x, kernel, stride)


def maxpool2d_backward(x_shape, argmax, grad, kernel: int, stride: int):
    return _impl.maxpool2d_backward(x_shape, argmax, grad, kernel, stride)
