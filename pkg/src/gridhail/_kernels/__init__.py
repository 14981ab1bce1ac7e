"""Hot kernels with backend selection at import.

The compiled Cython kernel is preferred; the pure-Python twin is used when
the extension is absent or GRIDHAIL_PURE_PY is set. Both implement the same
algorithm and return identical assignments.
"""

import os

if os.environ.get("GRIDHAIL_PURE_PY", "") not in ("", "0"):
    from .matching_py import max_weight_assign

    BACKEND = "python"
else:
    try:
        from ._matching_cy import max_weight_assign

        BACKEND = "compiled"
    except ImportError:
        from .matching_py import max_weight_assign

        BACKEND = "python"

__all__ = ["max_weight_assign", "BACKEND"]
