"""Backend selection for the hot kernels.

Set ``RLPIPE_BACKEND=numpy`` to force the pure-numpy path; the default is
``numba`` when it imports cleanly.
"""
import os

_requested = os.environ.get("RLPIPE_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ImportError(f"RLPIPE_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

HAS_NUMBA = False
if _requested == "numba":
    try:
        import numba  # noqa: F401

        HAS_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a hard dependency
        HAS_NUMBA = False

BACKEND = "numba" if HAS_NUMBA else "numpy"


def maybe_njit(func):
    """Compile with numba when the numba backend is active, else return as is."""
    if HAS_NUMBA:
        from numba import njit

        return njit(cache=True)(func)
    return func
