"""Numba switch.

Set ``MRES_SEG_NUMBA=0`` to force the pure-numpy kernels (also used when
numba is not importable).
"""
import logging
import os

LOG = logging.getLogger(__name__)

_flag = os.environ.get("MRES_SEG_NUMBA", "1").strip().lower()
USE_NUMBA = _flag not in ("0", "false", "no", "off")

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None
    if USE_NUMBA:
        LOG.info("numba not importable; using numpy kernels")
    USE_NUMBA = False

HAVE_NUMBA = numba is not None


def njit(fn):
    """``numba.njit(cache=True)`` when numba exists, else the python function."""
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)
