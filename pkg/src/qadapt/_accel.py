"""Numba availability switch.

Set ``QADAPT_NUMBA=0`` to force the pure-numpy code paths. The flag is read
once at import time; tests that compare both paths call the ``*_numpy`` and
``*_numba`` variants directly instead of toggling it.
"""
import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("QADAPT_NUMBA", "1").lower() not in ("0", "false", "no", "off")


def njit(*args, **kwargs):
    """``numba.njit(cache=True)`` when numba is installed, identity otherwise."""
    kwargs.setdefault("cache", True)
    if not HAVE_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    return numba.njit(*args, **kwargs)
