"""Hot geometry kernels with a numba fast path and a pure-numpy fallback.

The backend is chosen once at import time. Set ``POINTLNL_NUMBA=0`` in the
environment to force the numpy fallback; the fallback is also used
automatically when numba is not importable. Both backends implement the
same contracts bit-for-bit identical index outputs (selection logic uses
the same arithmetic and the same lowest-index tie-breaking).
"""

import os

from . import _numpy

_FALSY = ("0", "false", "off", "no")


def _want_numba() -> bool:
    return os.environ.get("POINTLNL_NUMBA", "1").strip().lower() not in _FALSY


if _want_numba():
    try:
        from . import _numba as _impl

        BACKEND = "numba"
    except ImportError:
        _impl = _numpy
        BACKEND = "numpy"
else:
    _impl = _numpy
    BACKEND = "numpy"

pairwise_sq_dist = _impl.pairwise_sq_dist
fps_indices = _impl.fps_indices
knn_indices = _impl.knn_indices
scatter_add_rows = _impl.scatter_add_rows


def backend_name() -> str:
    """Name of the active kernel backend ('numba' or 'numpy')."""
    return BACKEND
