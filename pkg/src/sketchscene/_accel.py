"""numba switch.

Set ``SKETCHSCENE_PURE_NUMPY=1`` to bypass numba entirely; every jitted kernel
then runs as plain Python/numpy. The flag is read once at import time.
"""
import os

PURE_NUMPY = os.environ.get("SKETCHSCENE_PURE_NUMPY", "0").lower() in ("1", "true", "yes")

try:
    if PURE_NUMPY:
        raise ImportError
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via env flag
    HAVE_NUMBA = False
    _njit = None


def njit(*args, **kwargs):
    """``numba.njit`` when available and enabled, identity decorator otherwise."""
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        return _njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrapper(f):
        return f

    return wrapper


BACKEND = "numba" if HAVE_NUMBA else "numpy"
