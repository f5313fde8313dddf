"""Backend selection for the RK4 sweeps.

The compiled extension is used when it was built and importable; setting
``CDSMOOTH_PURE_PYTHON=1`` forces the pure-Python fallback.
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("CDSMOOTH_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "cython"


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def affine_rk4(Ma, Mm, Mb, ca, cm, cb, y0, h, jumps=None, backend=None):
    impl = _select(backend)
    return impl.affine_rk4(_c(Ma), _c(Mm), _c(Mb), _c(ca), _c(cm), _c(cb), _c(y0), float(h),
                           None if jumps is None else _c(jumps))


def lyap_rk4(Ma, Mm, Mb, Sa, Sm, Sb, Y0, h, jumps=None, backend=None):
    impl = _select(backend)
    return impl.lyap_rk4(_c(Ma), _c(Mm), _c(Mb), _c(Sa), _c(Sm), _c(Sb), _c(Y0), float(h),
                         None if jumps is None else _c(jumps))


def _select(backend):
    if backend is None:
        return _impl
    if backend == "python":
        return _kernels_py
    if backend == "cython":
        if _impl is _kernels_py:
            from . import _kernels
            return _kernels
        return _impl
    raise ValueError(f"unknown kernel backend {backend!r}")
