"""Numba switch.

Set ``TUMORBED_DISABLE_NUMBA=1`` to route every kernel through its pure-numpy
implementation. The flag is read once, at import time.
"""

import os

_nogil = True
_cache = True
_fastmath = False
_boundscheck = False

numba_default = {
    "nogil": _nogil,
    "cache": _cache,
    "fastmath": _fastmath,
    "boundscheck": _boundscheck,
}

try:
    import numba as _numba
except ImportError:  # pragma: no cover
    _numba = None

HAVE_NUMBA = _numba is not None


def _env_disabled() -> bool:
    flag = os.environ.get("TUMORBED_DISABLE_NUMBA", "")
    return flag.strip().lower() in {"1", "true", "yes", "on"}


USE_NUMBA = HAVE_NUMBA and not _env_disabled()


def jit(func):
    """Lazily compile ``func`` with the package settings (identity without numba)."""
    if not HAVE_NUMBA:
        return func
    return _numba.njit(**numba_default)(func)


def select(numba_impl, numpy_impl):
    return numba_impl if USE_NUMBA else numpy_impl


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
