"""Optional numba acceleration.

Set ``SLOPE_LAB_NUMBA=0`` to force the pure-numpy kernels. When numba is not
importable the numpy path is used regardless of the flag.
"""
import os

try:
    from numba import njit as _njit
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _njit = None
    HAS_NUMBA = False


def _flag_enabled():
    return os.environ.get("SLOPE_LAB_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


USE_NUMBA = HAS_NUMBA and _flag_enabled()


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise an identity decorator."""
    if not HAS_NUMBA:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return _njit(*args, **kwargs)


def backend():
    return "numba" if USE_NUMBA else "numpy"
