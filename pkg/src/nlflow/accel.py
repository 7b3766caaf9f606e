"""Numba acceleration toggle.

Hot loops in this package ship in two versions: a scalar kernel compiled
with ``numba.njit`` and a vectorized pure-numpy fallback.  The environment
variable ``NLFLOW_NUMBA`` selects the path at import time:

* unset / ``1`` -- use numba when importable (default),
* ``0`` / ``false`` / ``no`` / ``off`` -- force the numpy fallback.

Both paths are exercised by the test suite and compared by
``benchmarks/bench_kernels.py``.
"""

import os


def _numba_requested() -> bool:
    flag = os.environ.get("NLFLOW_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


NUMBA_ENABLED = False
if _numba_requested():
    try:
        import numba  # noqa: F401

        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover - numba is a hard dependency
        NUMBA_ENABLED = False


def njit(*args, **kwargs):
    """``numba.njit`` when enabled, identity decorator otherwise.

    Usage matches numba: ``@njit(cache=True)``.  When numba is disabled the
    decorated function is returned unchanged, so modules can still compile
    their kernels unconditionally; dispatchers should nevertheless prefer
    the vectorized fallback when ``NUMBA_ENABLED`` is false.
    """
    if NUMBA_ENABLED:
        import numba

        return numba.njit(*args, **kwargs)

    def identity(func):
        return func

    if args and callable(args[0]) and not kwargs:
        return args[0]
    return identity


def use_numba(override=None) -> bool:
    """Resolve a per-call ``use_numba`` override against the global flag."""
    if override is None:
        return NUMBA_ENABLED
    return bool(override) and NUMBA_ENABLED
