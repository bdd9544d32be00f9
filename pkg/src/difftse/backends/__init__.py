"""Kernel backend selection.

The hot numeric loops (time-axis convolution, fused Adam/EMA updates,
Euler-Maruyama stepping, overlap-add) exist twice: a pure-numpy reference
in ``numpy_impl`` and numba ``@njit`` twins in ``numba_impl``.  The active
implementation is chosen once at import time from the ``DIFFTSE_BACKEND``
environment variable:

    DIFFTSE_BACKEND=numba   force numba (error if numba is not installed)
    DIFFTSE_BACKEND=numpy   force the pure-numpy path
    DIFFTSE_BACKEND=auto    numba if importable, else numpy (default)

Both paths compute the same quantities with the same operation order per
element; results are deterministic within a backend.
"""

import os

from . import numpy_impl

_VALID = ("auto", "numba", "numpy")

_requested = os.environ.get("DIFFTSE_BACKEND", "auto").lower()
if _requested not in _VALID:
    raise RuntimeError(
        f"DIFFTSE_BACKEND={_requested!r} not understood; expected one of {_VALID}"
    )

if _requested == "numpy":
    _impl = numpy_impl
    _active = "numpy"
else:
    try:
        from . import numba_impl as _impl
        _active = "numba"
    except ImportError:
        if _requested == "numba":
            raise RuntimeError(
                "DIFFTSE_BACKEND=numba but numba is not importable"
            )
        _impl = numpy_impl
        _active = "numpy"


def active_backend() -> str:
    """Name of the kernel backend selected at import time."""
    return _active


timeconv_fwd = _impl.timeconv_fwd
timeconv_bwd_x = _impl.timeconv_bwd_x
timeconv_bwd_k = _impl.timeconv_bwd_k
dwconv_fwd = _impl.dwconv_fwd
dwconv_bwd_x = _impl.dwconv_bwd_x
dwconv_bwd_k = _impl.dwconv_bwd_k
silu_fwd = _impl.silu_fwd
silu_bwd = _impl.silu_bwd
glu_fwd = _impl.glu_fwd
glu_bwd = _impl.glu_bwd
adam_ema_step = _impl.adam_ema_step
em_step = _impl.em_step
overlap_add = _impl.overlap_add

KERNEL_NAMES = (
    "timeconv_fwd", "timeconv_bwd_x", "timeconv_bwd_k",
    "dwconv_fwd", "dwconv_bwd_x", "dwconv_bwd_k",
    "silu_fwd", "silu_bwd", "glu_fwd", "glu_bwd",
    "adam_ema_step", "em_step", "overlap_add",
)
