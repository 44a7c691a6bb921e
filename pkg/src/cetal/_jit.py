"""Numba switch.

Set ``CETAL_JIT=0`` before import to force the pure-numpy kernels. When numba
is missing the numpy path is used regardless.
"""

import os

_flag = os.environ.get("CETAL_JIT", "1").strip().lower()
JIT_REQUESTED = _flag not in ("0", "false", "no", "off")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_JIT = JIT_REQUESTED and HAVE_NUMBA


def njit(*args, **kwargs):
    """``numba.njit(cache=True)`` when numba is importable, identity otherwise."""
    if not HAVE_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)


def configure_threads():
    """Apply ``CETAL_THREADS`` to numba's thread pool, if set."""
    value = os.environ.get("CETAL_THREADS")
    if not value or not HAVE_NUMBA:
        return
    try:
        numba.set_num_threads(max(1, min(int(value), numba.config.NUMBA_NUM_THREADS)))
    except ValueError:
        pass
