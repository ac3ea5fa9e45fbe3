"""Numba switch.

Set ``MDELAB_DISABLE_NUMBA=1`` to force the pure-numpy code paths, e.g. for
debugging or on platforms without a working numba/llvmlite.
"""
from __future__ import annotations

import functools
import os

_disabled = os.environ.get("MDELAB_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _disabled:
        raise ImportError("numba disabled by MDELAB_DISABLE_NUMBA")
    from numba import njit as _njit

    NUMBA_ENABLED = True
except ImportError:
    NUMBA_ENABLED = False
    _njit = None


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if NUMBA_ENABLED:
        return _njit(*args, **kwargs)

    def decorator(func):
        @functools.wraps(func)
        def wrapper(*a, **kw):
            return func(*a, **kw)

        return wrapper

    if len(args) == 1 and callable(args[0]) and not kwargs:
        return decorator(args[0])
    return decorator


__all__ = ["njit", "NUMBA_ENABLED"]
