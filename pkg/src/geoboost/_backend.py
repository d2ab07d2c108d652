"""Numba backend detection and selection.

The hot kernels in :mod:`geoboost.kernels` exist twice: a numba ``@njit``
version and a pure-numpy version. Which one the package uses is decided
once at import from the ``GEOBOOST_NUMBA`` environment variable:

* unset or ``auto`` — numba if importable, numpy otherwise;
* ``1`` — require numba (warns and falls back if it is missing);
* ``0`` — force the pure-numpy path.

Both paths produce bit-identical results; see tests/test_kernels.py.
"""

import os
import warnings


class PerformanceWarning(UserWarning):
    pass


try:
    from numba import njit  # noqa: F401

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


def _resolve_default() -> bool:
    flag = os.environ.get("GEOBOOST_NUMBA", "auto").strip().lower()
    if flag in ("0", "false", "no", "off"):
        return False
    if flag in ("1", "true", "yes", "on"):
        if not HAVE_NUMBA:
            warnings.warn(
                "GEOBOOST_NUMBA=1 but numba is not installed; "
                "falling back to the pure-numpy kernels",
                PerformanceWarning,
                stacklevel=2,
            )
        return HAVE_NUMBA
    return HAVE_NUMBA


USE_NUMBA = _resolve_default()
