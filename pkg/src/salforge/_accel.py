"""Optional numba acceleration.

Hot kernels are written once as plain Python loops and compiled with
``numba.njit`` when available. Setting ``SALFORGE_NUMBA=0`` (or running
without numba installed) selects the vectorized numpy fallbacks instead.
"""

import os

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False


def numba_enabled():
    flag = os.environ.get("SALFORGE_NUMBA", "1").strip().lower()
    return HAS_NUMBA and flag not in ("0", "false", "no", "off")


USE_NUMBA = numba_enabled()


def njit(func):
    """Compile ``func`` in nopython mode, or return it untouched without numba.

    fastmath stays off: finite-difference tests need IEEE semantics.
    """
    if not HAS_NUMBA:
        return func
    return numba.njit(cache=True, fastmath=False)(func)
