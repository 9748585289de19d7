"""Hot-kernel dispatch: compiled extension when importable, numpy otherwise.

Set ``KOLMO_PURE_PYTHON=1`` to force the numpy fallback.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("KOLMO_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "cython"


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _i(a):
    return np.ascontiguousarray(a, dtype=np.intp)


def generator(rates, src, dst, n_states):
    return _impl.generator(_c(rates), _i(src), _i(dst), int(n_states))


def generator_vjp(gQ, src, dst):
    return _impl.generator_vjp(_c(gQ), _i(src), _i(dst))


def kfe_kbe(Pf, Pb, Q):
    return _impl.kfe_kbe(_c(Pf), _c(Pb), _c(Q))


def kfe_kbe_vjp(Pf, Pb, Q, cf, cb):
    return _impl.kfe_kbe_vjp(_c(Pf), _c(Pb), _c(Q), _c(cf), _c(cb))


def concordance_counts(surv_at_event, event_subject, times):
    return _impl.concordance_counts(_c(surv_at_event), _i(event_subject), _c(times))


def use_backend(name: str):
    """Switch backend at runtime (``"cython"`` or ``"python"``); for benchmarks and tests."""
    global _impl, BACKEND
    if name == "python":
        _impl, BACKEND = _kernels_py, "python"
    elif name == "cython":
        from . import _kernels as compiled
        _impl, BACKEND = compiled, "cython"
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
