"""Backend selection for the hot numeric kernels.

Set ``ROMDP_DISABLE_NUMBA=1`` to force the pure-numpy code path even when
numba is importable. The flag is read once, at import time.
"""
from __future__ import annotations

import os

_DISABLED = os.environ.get("ROMDP_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    if _DISABLED:
        raise ImportError("numba disabled by ROMDP_DISABLE_NUMBA")
    import numba

    HAS_NUMBA = True
except ImportError:
    numba = None
    HAS_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise an identity decorator."""
    if HAS_NUMBA:
        return numba.njit(*args, **kwargs)

    def wrap(fn):
        return fn

    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return wrap


def backend_name() -> str:
    return "numba" if HAS_NUMBA else "numpy"
