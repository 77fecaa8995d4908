"""Numba switch.

Set ``NDTRANGE_DISABLE_NUMBA=1`` to run every hot kernel through its pure-numpy
implementation instead of the compiled loop.
"""

import os
from typing import Any, Callable

_disabled = os.environ.get("NDTRANGE_DISABLE_NUMBA", "0").strip().lower() in ("1", "true", "yes")

try:
    from numba import njit as _numba_njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _disabled


def njit(*args: Any, **kwargs: Any) -> Callable:
    """``numba.njit`` when numba is importable, otherwise a no-op decorator.

    The loop kernels are always defined so they can be compared against the
    numpy path even when the numpy path is the one selected.
    """
    if HAVE_NUMBA:
        return _numba_njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f
