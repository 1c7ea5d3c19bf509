"""Hot pixel-grid kernels with a numba backend and a pure-numpy fallback.

The backend is chosen once at import time from the environment variable
``GCDLAB_NUMBA``: set it to ``0`` (or ``false``/``off``) to force the numpy
fallback. The numba kernels are integer/boolean exact and produce results
identical to the fallback.

Kernels:
  supercover_pixels(r0, c0, r1, c1)
      all pixel cells (unit squares centered on integer lattice points)
      whose closed square the closed segment intersects
  segment_blocked(grid, r0, c0, r1, c1, keep_a, keep_b)
      True if the segment's supercover touches any grid id not in
      {0, keep_a, keep_b}
"""

from __future__ import annotations

import os

_flag = os.environ.get("GCDLAB_NUMBA", "1").strip().lower()
_want_numba = _flag not in ("0", "false", "off", "no")

if _want_numba:
    try:
        from . import numba_impl as _impl

        BACKEND = "numba"
    except ImportError:  # numba missing; fall back silently
        from . import numpy_impl as _impl

        BACKEND = "numpy"
else:
    from . import numpy_impl as _impl

    BACKEND = "numpy"

supercover_pixels = _impl.supercover_pixels
segment_blocked = _impl.segment_blocked


def backend_name() -> str:
    return BACKEND
