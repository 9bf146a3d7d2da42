"""Hot numeric kernels with two interchangeable backends.

The numba backend compiles the inner loops; the numpy backend is a pure
vectorized fallback. Both produce identical results. Selection happens once
at import time:

* ``LAYOUTFUSE_BACKEND=numpy`` forces the pure-numpy path.
* ``LAYOUTFUSE_BACKEND=numba`` requires numba and fails loudly without it.
* unset: numba when importable, numpy otherwise.

``benchmarks/bench_kernels.py`` compares the two.
"""

from __future__ import annotations

import os

_requested = os.environ.get("LAYOUTFUSE_BACKEND", "").strip().lower()
if _requested not in ("", "numpy", "numba"):
    raise ImportError(
        f"LAYOUTFUSE_BACKEND must be 'numpy' or 'numba', got {_requested!r}"
    )

if _requested == "numpy":
    from . import _numpy as _impl

    BACKEND = "numpy"
elif _requested == "numba":
    from . import _numba as _impl

    BACKEND = "numba"
else:
    try:
        from . import _numba as _impl

        BACKEND = "numba"
    except ImportError:
        from . import _numpy as _impl

        BACKEND = "numpy"

rle_encode = _impl.rle_encode
rle_decode = _impl.rle_decode
rle_overlap = _impl.rle_overlap
rle_paint = _impl.rle_paint
fill_polygon = _impl.fill_polygon
grey_erode = _impl.grey_erode
grey_dilate = _impl.grey_dilate
convolve_separable = _impl.convolve_separable

__all__ = [
    "BACKEND",
    "rle_encode",
    "rle_decode",
    "rle_overlap",
    "rle_paint",
    "fill_polygon",
    "grey_erode",
    "grey_dilate",
    "convolve_separable",
]
