"""Kernel backend selection.

The hot kernels (dense/depthwise/transposed convolution and cumulative
layer norm, forward and backward) exist twice: a numba-jitted version and
a pure-numpy version with identical semantics. The DTSE_BACKEND
environment variable picks one at import time:

    DTSE_BACKEND=numba   force numba (ImportError if numba is missing)
    DTSE_BACKEND=numpy   force pure numpy
    unset / auto         numba when importable, numpy otherwise

Both accumulate in float64 and store float32, so swapping backends moves
results by at most one float32 ulp.
"""

import os

_choice = os.environ.get("DTSE_BACKEND", "auto").lower()

if _choice in ("auto", ""):
    try:
        from . import numba_backend as _impl

        BACKEND = "numba"
    except ImportError:
        from . import numpy_backend as _impl

        BACKEND = "numpy"
elif _choice == "numba":
    from . import numba_backend as _impl

    BACKEND = "numba"
elif _choice == "numpy":
    from . import numpy_backend as _impl

    BACKEND = "numpy"
else:
    raise ValueError(
        f"DTSE_BACKEND={_choice!r} not recognized (expected 'numba', 'numpy' or unset)"
    )

conv1d_fwd = _impl.conv1d_fwd
conv1d_bwd = _impl.conv1d_bwd
dwconv1d_fwd = _impl.dwconv1d_fwd
dwconv1d_bwd = _impl.dwconv1d_bwd
convT1d_fwd = _impl.convT1d_fwd
convT1d_bwd = _impl.convT1d_bwd
cln_fwd = _impl.cln_fwd
cln_bwd = _impl.cln_bwd
