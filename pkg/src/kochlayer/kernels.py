"""Kernel selection: the compiled extension when importable, numpy otherwise.

Set ``KOCHLAYER_PURE=1`` to force the numpy path.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

BACKEND = "numpy"
_impl = _kernels_py

if os.environ.get("KOCHLAYER_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on the build
        _impl = _kernels_py


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def element_gradients(xy, tris):
    return _impl.element_gradients(_f64(xy), _i64(tris))


def p_dirichlet(gphi, tris, coef, u, p, eta=0.0, hess=False):
    return _impl.p_dirichlet(_f64(gphi), _i64(tris), _f64(coef), _f64(u), float(p), float(eta), bool(hess))


def p_mass(tris, area, bary, qw, u, p, eta=0.0, hess=False):
    return _impl.p_mass(_i64(tris), _f64(area), _f64(bary), _f64(qw), _f64(u), float(p), float(eta), bool(hess))


def pair_p(pairs, weight, u, p, eta=0.0, hess=False):
    return _impl.pair_p(_i64(pairs), _f64(weight), _f64(u), float(p), float(eta), bool(hess))


def inv_x_integral(s, area):
    return _impl.inv_x_integral(_f64(s), _f64(area))


def use_backend(name: str):
    """Switch implementations at runtime (benchmarks and tests)."""
    global _impl, BACKEND
    if name == "numpy":
        _impl, BACKEND = _kernels_py, "numpy"
    elif name == "cython":
        from . import _ckernels

        _impl, BACKEND = _ckernels, "cython"
    else:
        raise ValueError(f"unknown backend {name!r}")
    return BACKEND
