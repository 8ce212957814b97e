"""Symmetric quadrature rules on the reference triangle (0,0), (1,0), (0,1).

Points are barycentric triples; weights sum to 1 so a rule integrates as
``area * sum(w * f(points))``.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre


def _orbit3(a: float):
    b = 1.0 - 2.0 * a
    return [(a, a, b), (a, b, a), (b, a, a)]


def _orbit6(a: float, b: float):
    c = 1.0 - a - b
    return [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)]


def _rule(groups):
    pts, wts = [], []
    for w, orbit in groups:
        pts.extend(orbit)
        wts.extend([w] * len(orbit))
    return np.array(pts), np.array(wts)


_RULES = {
    1: lambda: (np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0])),
    2: lambda: _rule([(1 / 3, _orbit3(1 / 6))]),
    4: lambda: _rule([
        (0.223381589678011, _orbit3(0.445948490915965)),
        (0.109951743655322, _orbit3(0.091576213509771)),
    ]),
    5: lambda: _rule([
        (0.225, [(1 / 3, 1 / 3, 1 / 3)]),
        (0.132394152788506, _orbit3(0.470142064105115)),
        (0.125939180544827, _orbit3(0.101286507323456)),
    ]),
    6: lambda: _rule([
        (0.116786275726379, _orbit3(0.249286745170910)),
        (0.050844906370207, _orbit3(0.063089014491502)),
        (0.082851075618374, _orbit6(0.053145049844817, 0.310352451033784)),
    ]),
}


def _collapsed_gauss(degree: int):
    """Conical product rule exact for total degree ``degree``."""
    m = degree // 2 + 1
    xl, wl = roots_legendre(m)
    xj, wj = roots_jacobi(m, 1.0, 0.0)
    # map to [0, 1]; Jacobi (1-s)^1 weight absorbs the collapse Jacobian
    s = 0.5 * (xj + 1.0)
    ws = wj / 4.0
    t = 0.5 * (xl + 1.0)
    wt = wl / 2.0
    pts, wts = [], []
    for si, wsi in zip(s, ws):
        for ti, wti in zip(t, wt):
            x = si
            y = (1.0 - si) * ti
            pts.append((1.0 - x - y, x, y))
            wts.append(2.0 * wsi * wti)
    return np.array(pts), np.array(wts)


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Barycentric points ``(m, 3)`` and weights ``(m,)`` exact for polynomials of ``degree``."""
    if degree < 1:
        degree = 1
    for d in sorted(_RULES):
        if d >= degree:
            pts, wts = _RULES[d]()
            break
    else:
        pts, wts = _collapsed_gauss(degree)
    pts.setflags(write=False)
    wts.setflags(write=False)
    return pts, wts


def monomial_integral(i: int, j: int) -> float:
    """Exact integral of x**i y**j over the reference triangle."""
    from math import factorial

    return factorial(i) * factorial(j) / factorial(i + j + 2)


def integrate_on_triangles(values_at_points: np.ndarray, areas: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Per-triangle integrals from values of shape (nt, m)."""
    return areas * (values_at_points @ weights)
