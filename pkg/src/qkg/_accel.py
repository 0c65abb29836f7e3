"""Backend selection for the compiled graph kernels.

Set ``QKG_DISABLE_NUMBA=1`` to force the pure-numpy path. The flag is read
once at import time.
"""

from __future__ import annotations

import os

JIT_OPTIONS = {"nogil": True, "cache": True}


def _numba_requested() -> bool:
    flag = os.environ.get("QKG_DISABLE_NUMBA", "").strip().lower()
    return flag not in ("1", "true", "yes", "on")


try:
    if not _numba_requested():
        raise ImportError("numba disabled by QKG_DISABLE_NUMBA")
    import numba  # noqa: F401

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

BACKEND = "numba" if HAS_NUMBA else "numpy"
