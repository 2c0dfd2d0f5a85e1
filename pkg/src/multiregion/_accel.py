# Numba switch for the hot kernels.
#
# Set MULTIREGION_DISABLE_NUMBA=1 to force the pure-numpy fallbacks, e.g. on
# platforms without an LLVM toolchain or when debugging a kernel.

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is an optional accelerator
    numba = None

ENV_FLAG = "MULTIREGION_DISABLE_NUMBA"

NUMBA_AVAILABLE = numba is not None
USE_NUMBA = NUMBA_AVAILABLE and os.environ.get(ENV_FLAG, "0").strip() not in ("1", "true", "yes")


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, otherwise an identity decorator.

    Kernels decorated here are always defined; whether they are *dispatched*
    is decided by ``USE_NUMBA`` in :mod:`multiregion._kernels`.
    """
    if NUMBA_AVAILABLE:
        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrapper(func):
        return func

    return wrapper
