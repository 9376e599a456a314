"""Kernel backend selection.

The hot kernels exist twice: numba-jitted (`_kernels_numba`) and pure
numpy (`_kernels_numpy`). The active backend is chosen once at import
time from the DITQUANT_BACKEND environment variable:

    DITQUANT_BACKEND=numba   require the jitted kernels (error if numba
                             is not importable)
    DITQUANT_BACKEND=numpy   force the pure-numpy fallback
    unset / "auto"           numba when available, numpy otherwise

Everything downstream imports `kernels` from here; a run never mixes
backends. Within a backend all kernels are deterministic, so reruns under
the same environment are bit-identical.
"""

import os

from . import _kernels_numpy
from .errors import ConfigError

_ENV_VAR = "DITQUANT_BACKEND"

try:
    from . import _kernels_numba

    _NUMBA_IMPORT_ERROR = None
except ImportError as exc:  # pragma: no cover - depends on environment
    _kernels_numba = None
    _NUMBA_IMPORT_ERROR = exc


def _select():
    choice = os.environ.get(_ENV_VAR, "auto").strip().lower()
    if choice in ("auto", ""):
        return _kernels_numba if _kernels_numba is not None else _kernels_numpy
    if choice == "numba":
        if _kernels_numba is None:
            raise ConfigError(
                f"{_ENV_VAR}=numba but numba is not importable: {_NUMBA_IMPORT_ERROR}"
            )
        return _kernels_numba
    if choice == "numpy":
        return _kernels_numpy
    raise ConfigError(f"{_ENV_VAR} must be 'numba', 'numpy' or 'auto', got {choice!r}")


kernels = _select()


def backend_name() -> str:
    """Name of the active kernel backend ('numba' or 'numpy')."""
    return kernels.NAME


def numba_available() -> bool:
    return _kernels_numba is not None
