"""Optional numba acceleration.

Kernels are written once in numba-compatible numpy and compiled with
``numba.njit`` unless ``GNNBOUND_NUMBA=0`` is set or numba is missing, in
which case the very same functions run as plain Python/numpy.
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

__all__ = ["NUMBA_ENABLED", "njit"]


def _flag_enabled():
    value = os.environ.get("GNNBOUND_NUMBA", "1").strip().lower()
    return value not in ("0", "false", "no", "off")


NUMBA_ENABLED = numba is not None and _flag_enabled()


def njit(f=None, **options):
    """``numba.njit`` when acceleration is on, identity otherwise.

    The undecorated Python function stays reachable as ``.py_func`` in both
    modes so benchmarks can compare the two paths in one process.
    """
    options.setdefault("cache", True)

    def wrap(func):
        if not NUMBA_ENABLED:
            func.py_func = func
            return func
        return numba.njit(**options)(func)

    if f is None:
        return wrap
    return wrap(f)
