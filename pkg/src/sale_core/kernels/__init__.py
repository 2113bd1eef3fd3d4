"""Hot kernels with a numba path and a pure-numpy fallback.

The active backend is chosen once at import time from ``SALE_CORE_BACKEND``
(``numba`` or ``numpy``; default ``numba`` when it imports). Both backends
expose the same four functions and can be fetched explicitly with
:func:`get_backend` for side-by-side comparison.
"""
import os
from types import ModuleType

from . import _numpy

BACKENDS = ("numba", "numpy")


def _load(name: str) -> ModuleType:
    if name == "numpy":
        return _numpy
    if name == "numba":
        from . import _numba

        return _numba
    raise ValueError(f"unknown kernel backend {name!r}; expected one of {BACKENDS}")


def get_backend(name: str | None = None) -> ModuleType:
    """Return the kernel module for ``name`` (default: the active backend)."""
    return _active if name is None else _load(name)


def _select() -> tuple[str, ModuleType]:
    wanted = os.environ.get("SALE_CORE_BACKEND", "numba").strip().lower() or "numba"
    if wanted == "numba":
        try:
            return "numba", _load("numba")
        except ImportError:
            return "numpy", _numpy
    return wanted, _load(wanted)


ACTIVE_BACKEND, _active = _select()


def set_threads(n: int | None) -> int:
    """Bound worker parallelism. Returns the thread count actually in effect.

    ``None`` falls back to ``SALE_CORE_THREADS``, then to the numba default.
    Has no effect on the numpy backend.
    """
    if n is None:
        env = os.environ.get("SALE_CORE_THREADS")
        n = int(env) if env else None
    if ACTIVE_BACKEND != "numba":
        return 1
    import numba

    limit = numba.config.NUMBA_NUM_THREADS
    if n is None:
        return numba.get_num_threads()
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    numba.set_num_threads(min(n, limit))
    return numba.get_num_threads()


def dense_attention(q, k, v, scale):
    return _active.dense_attention(q, k, v, scale)


def sink_local_stats(q, k, scale, b_q, b_k, sl_idx, sl_cnt):
    return _active.sink_local_stats(q, k, scale, b_q, b_k, sl_idx, sl_cnt)


def estimate_middle(qc, kc, sq, sk, scale, bound, b_q, b_k, mid_lo, mid_hi, out):
    return _active.estimate_middle(qc, kc, sq, sk, scale, bound, b_q, b_k, mid_lo, mid_hi, out)


def sparse_attention(q, k, v, bits, b_q, b_k, scale):
    return _active.sparse_attention(q, k, v, bits, b_q, b_k, scale)
