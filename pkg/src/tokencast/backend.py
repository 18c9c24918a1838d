"""Backend selection for the hot numeric kernels.

Every kernel in :mod:`tokencast.kernels` exists twice: a numba ``@njit``
version and a vectorized pure-numpy fallback. The active implementation is
chosen once at import time:

* ``TOKENCAST_DISABLE_NUMBA=1`` in the environment forces the numpy path.
* If numba is not importable the numpy path is used automatically.

``bench/bench_kernels.py`` times both paths side by side.
"""

import os

_ENV_FLAG = "TOKENCAST_DISABLE_NUMBA"


def _numba_available() -> bool:
    # workqueue has the lowest fork/join overhead for our small parallel regions
    os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


def blas_single_thread():
    """Context manager pinning BLAS pools to one thread.

    The training matmuls are small enough that BLAS threading loses to the
    pool contention it causes with the parallel numba kernels; measured on
    2 cores the single-thread-BLAS combination is about twice as fast.
    """
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - threadpoolctl ships with scipy stacks
        from contextlib import nullcontext

        return nullcontext()
    return threadpool_limits(limits=1, user_api="blas")


NUMBA_ENABLED: bool = os.environ.get(_ENV_FLAG, "0") not in ("1", "true", "yes") and _numba_available()


def backend_name() -> str:
    """Name of the active kernel backend, ``"numba"`` or ``"numpy"``."""
    return "numba" if NUMBA_ENABLED else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when the numba backend is active, identity otherwise.

    Decorated functions keep working (as plain Python) when numba is
    disabled, which keeps import of :mod:`tokencast.kernels` cheap and makes
    the fallback path importable on machines without numba.
    """
    if NUMBA_ENABLED:
        import numba

        return numba.njit(*args, **kwargs)
    if args and callable(args[0]):
        return args[0]

    def wrap(fn):
        return fn

    return wrap


if NUMBA_ENABLED:
    from numba import prange
else:
    prange = range
