"""Backend selection for the hot kernels.

Kernels are written twice: a numba ``@njit`` version and a vectorised numpy
version. The numba path is used when numba imports and the environment flag
``IRFIELD_DISABLE_NUMBA`` is unset (or ``0``). Callers never import numba
directly; they ask :func:`numba_enabled` at call time, so the backend can be
flipped at runtime for tests and benchmarks.
"""

import os
from contextlib import contextmanager

try:
    import numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    NUMBA_AVAILABLE = False

ENV_FLAG = "IRFIELD_DISABLE_NUMBA"

_enabled = NUMBA_AVAILABLE and os.environ.get(ENV_FLAG, "0") in ("", "0")


def njit(*args, **kwargs):
    """``numba.njit`` with ``cache=True`` and ``nogil=True``; identity without numba."""
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)

    if not NUMBA_AVAILABLE:
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f
    return numba.njit(*args, **kwargs)


def numba_enabled():
    return _enabled


def set_numba(flag):
    """Switch backend; returns the previous setting."""
    global _enabled
    prev = _enabled
    _enabled = bool(flag) and NUMBA_AVAILABLE
    return prev


@contextmanager
def backend(use_numba):
    prev = set_numba(use_numba)
    try:
        yield
    finally:
        set_numba(prev)


def backend_name():
    return "numba" if _enabled else "numpy"
