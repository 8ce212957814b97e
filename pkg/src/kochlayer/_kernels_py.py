"""Pure numpy versions of the element kernels.

Every kernel returns per-element arrays; reductions happen in the caller in
element order, so results do not depend on how the elements were chunked.
"""

from __future__ import annotations

import numpy as np


def element_gradients(xy: np.ndarray, tris: np.ndarray):
    """Gradients of the three P1 basis functions and the signed areas."""
    p0 = xy[tris[:, 0]]
    p1 = xy[tris[:, 1]]
    p2 = xy[tris[:, 2]]
    d1 = p1 - p0
    d2 = p2 - p0
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    g = np.empty((len(tris), 3, 2))
    g[:, 1, 0] = d2[:, 1] / det
    g[:, 1, 1] = -d2[:, 0] / det
    g[:, 2, 0] = -d1[:, 1] / det
    g[:, 2, 1] = d1[:, 0] / det
    g[:, 0] = -g[:, 1] - g[:, 2]
    return g, 0.5 * det


def p_dirichlet(gphi, tris, coef, u, p: float, eta: float, hess: bool):
    """``coef/p * (|grad u|^2 + eta^2)^(p/2)`` per element, with gradient and Hessian blocks."""
    ue = u[tris]
    # differences against the first vertex: exact zero gradient for constants
    du = ue[:, 1:] - ue[:, :1]
    g = np.einsum("eij,ei->ej", gphi[:, 1:], du)
    r = np.einsum("ej,ej->e", g, g) + eta * eta
    e = coef * r ** (0.5 * p) / p
    gi = np.einsum("eij,ej->ei", gphi, g)  # grad(phi_i) . grad(u)
    s = coef * r ** (0.5 * p - 1.0)
    ge = s[:, None] * gi
    if not hess:
        return e, ge, None
    kk = np.einsum("eik,ejk->eij", gphi, gphi)
    he = s[:, None, None] * kk
    if p != 2.0:
        with np.errstate(divide="ignore", invalid="ignore"):
            t = coef * (p - 2.0) * np.where(r > 0, r ** (0.5 * p - 2.0), 0.0)
        he += t[:, None, None] * gi[:, :, None] * gi[:, None, :]
    return e, ge, he


def p_mass(tris, area, bary, qw, u, p: float, eta: float, hess: bool):
    """``1/p * int |u|^p`` per element by quadrature; the Hessian uses ``(u^2+eta^2)``."""
    ue = u[tris]
    uq = ue @ bary.T  # (nt, m)
    au = np.abs(uq)
    e = area * ((au**p) @ qw) / p
    dq = au ** (p - 2.0) * uq if p != 2.0 else uq
    ge = area[:, None] * ((dq * qw) @ bary)
    if not hess:
        return e, ge, None
    hq = (p - 1.0) * (uq * uq + eta * eta) ** (0.5 * p - 1.0) if p != 2.0 else np.ones_like(uq)
    he = area[:, None, None] * np.einsum("em,mi,mj->eij", hq * qw, bary, bary)
    return e, ge, he


def pair_p(pairs, weight, u, p: float, eta: float, hess: bool):
    """``weight/p * (d^2 + eta^2)^(p/2)`` for node-pair differences ``d = u_j - u_i``."""
    d = u[pairs[:, 1]] - u[pairs[:, 0]]
    r = d * d + eta * eta
    e = weight * r ** (0.5 * p) / p
    s = weight * r ** (0.5 * p - 1.0)
    g = np.empty((len(pairs), 2))
    g[:, 1] = s * d
    g[:, 0] = -g[:, 1]
    if not hess:
        return e, g, None
    h = s.copy()
    if p != 2.0:
        with np.errstate(divide="ignore", invalid="ignore"):
            h += weight * (p - 2.0) * np.where(r > 0, r ** (0.5 * p - 2.0), 0.0) * d * d
    return e, g, h


def _ent(s):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(s > 0, s * np.log(np.where(s > 0, s, 1.0)), 0.0)


def _dd1(a, b):
    """First divided difference of ``s log s`` for ``a <= b``, confluent when close."""
    same = b - a <= 1e-12 * np.maximum(b, 1e-300)
    with np.errstate(divide="ignore", invalid="ignore"):
        gen = np.where(a > 0, np.log(b) + a / (b - a) * np.log1p((b - a) / np.where(a > 0, a, 1.0)), np.log(b))
        conf = np.log(b) + 1.0
    return np.where(same, conf, gen)


def inv_x_integral(s, area):
    """Exact integral of ``1/s`` over triangles whose vertices have abscissas ``s``.

    Uses ``int_T g'' = 2|T| g[s1, s2, s3]`` with ``g = s log s``.
    """
    s = np.sort(np.asarray(s, dtype=float), axis=1)
    a, b, c = s[:, 0], s[:, 1], s[:, 2]
    scale = np.maximum(c, 1e-300)
    ab = b - a <= 1e-12 * scale
    bc = c - b <= 1e-12 * scale
    d_ab = _dd1(a, b)
    d_bc = _dd1(b, c)
    d_ac = _dd1(a, c)
    with np.errstate(divide="ignore", invalid="ignore"):
        general = (d_bc - d_ab) / (c - a)
        # two equal nodes: derivative form on the equal pair
        eq_low = (d_ac - (np.log(np.where(a > 0, a, 1.0)) + 1.0)) / (c - a)
        eq_high = ((np.log(c) + 1.0) - d_ac) / (c - a)
        out = np.where(ab & bc, 0.5 / c, np.where(ab, eq_low, np.where(bc, eq_high, general)))
    return 2.0 * area * out
