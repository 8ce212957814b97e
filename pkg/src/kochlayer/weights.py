"""The singular fiber weight, the conductivity and a sampled A_p diagnostic."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import C1, EPS0, Collar, DomainGeometry, Region, check_amplitude, inner_depth, locate

log = logging.getLogger(__name__)


class PointOutsideFiber(ValueError):
    pass


class PointOutsideDomain(ValueError):
    pass


class QuadratureFailure(RuntimeError):
    pass


def unit_profile(x, eps, p: float):
    """Inverse weight on the unit collar: ``w = 3**n / profile``.

    Linear ``C1 x / (2**p + C1**p)`` near the corners and ``eps/2`` in the middle.
    """
    e = float(check_amplitude(eps))
    x = np.asarray(x, dtype=float)
    if np.any((x < 0.0) | (x > 1.0)):
        raise ValueError("abscissa outside [0, 1]")
    k = 2.0**p + C1**p
    a = e / C1
    out = np.where(x < a, C1 * x / k, np.where(x > 1.0 - a, (C1 - C1 * x) / k, e / 2.0))
    return out if out.ndim else float(out)


def profile_jump_ratio(p: float) -> float:
    """Ratio of the corner branch to the middle branch of the profile at ``x = eps/C1``."""
    return 2.0 / (2.0**p + C1**p)


def local_weight(x, eps: float, p: float, level: int):
    """Weight at unit abscissa ``x`` of a level-``level`` collar (no band check)."""
    x = np.asarray(x, dtype=float)
    a = eps / C1
    k = (2.0**p + C1**p) / C1
    s = 3.0**level
    with np.errstate(divide="ignore"):
        out = np.where(x < a, s * k / x, np.where(x > 1.0 - a, s * k / (1.0 - x), s * 2.0 / eps))
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class WeightField:
    geometry: DomainGeometry
    p: float
    unit: bool = False  # w == 1 on the fiber, for calibration

    @property
    def level(self) -> int:
        return self.geometry.level

    @property
    def eps(self) -> float:
        return self.geometry.eps_float

    def local(self, x):
        if self.unit:
            return np.ones_like(np.asarray(x, dtype=float))
        return local_weight(x, self.eps, self.p, self.level)

    def piece_coefficients(self) -> dict:
        """``{piece: (kind, c)}``: ``w = c`` on the rectangle, ``c/s`` on the corner triangles.

        ``s`` is the unit abscissa measured from the corner the triangle touches.
        """
        if self.unit:
            return {"T1": ("const", 1.0), "R": ("const", 1.0), "T2": ("const", 1.0)}
        s = 3.0**self.level
        k = s * (2.0**self.p + C1**self.p) / C1
        return {"T1": ("inv", k), "R": ("const", s * 2.0 / self.eps), "T2": ("inv", k)}


@dataclass(frozen=True)
class ConductivityField:
    weight: WeightField
    semantics: str = "set"

    @property
    def delta(self) -> float:
        return 0.75**self.weight.level

    @property
    def prefactor(self) -> float:
        return self.delta ** (1.0 - self.weight.p)


def weight_at(pt, field: WeightField) -> float:
    region, collar = locate(pt, field.geometry)
    if region != Region.INNER:
        raise PointOutsideFiber(f"point {tuple(map(float, pt))} is not in the inner fiber ({region})")
    x, _ = collar.to_local(np.array([float(pt[0]), float(pt[1])]))
    x = min(max(float(x), 0.0), 1.0)
    return float(field.local(x))


def conductivity_at(pt, field: ConductivityField) -> float:
    region, collar = locate(pt, field.weight.geometry)
    if region == Region.OUTSIDE:
        raise PointOutsideDomain(f"point {tuple(map(float, pt))} is outside the fibered domain")
    if region != Region.INNER:
        return 1.0
    x, _ = collar.to_local(np.array([float(pt[0]), float(pt[1])]))
    x = min(max(float(x), 0.0), 1.0)
    mult = collar.multiplicity if field.semantics == "multiset" else 1
    return mult * field.prefactor * float(field.weight.local(x))


# ---------------------------------------------------------------------------
# A_p diagnostic


def _chord(xc, tc, r2, x):
    h2 = r2 - (x - xc) ** 2
    if h2 <= 0:
        return None
    h = math.sqrt(h2)
    return tc - h, tc + h


def _cosine_rule(m: int):
    z, w = np.polynomial.legendre.leggauss(m)
    th = 0.5 * np.pi * (z + 1.0)
    # x = (1 - cos th)/2 on [0, 1], dx = sin(th) pi/4 dz
    return 0.5 * (1.0 - np.cos(th)), w * np.sin(th) * np.pi / 4.0


_COS_RULE_FINE = _cosine_rule(48)
_COS_RULE_COARSE = _cosine_rule(24)


def _collar_ball_integrals(collar: Collar, field: WeightField, center, radius: float, q: float):
    """Integrals over (ball and inner band of one collar) of 1, w and w**q, in plane units."""
    lc = collar.to_local(np.asarray(center, dtype=float))
    L = field.geometry.edge_length
    xc, tc = float(lc[0]), float(lc[1])
    rr = radius / L
    r2 = rr * rr
    eps = field.eps
    x0, x1 = max(0.0, xc - rr), min(1.0, xc + rr)
    if x0 >= x1 or tc - rr > eps / 2.0 or tc + rr < 0.0:
        return 0.0, 0.0, 0.0
    a = eps / C1

    def chord_len(x):
        c = _chord(xc, tc, r2, x)
        if c is None:
            return 0.0
        lo, hi = max(c[0], 0.0), min(c[1], float(inner_depth(x, eps)))
        return max(hi - lo, 0.0)

    brk = {x0, x1, *(b for b in (a, 1.0 - a, xc) if x0 < b < x1)}
    # where the circle crosses the band's lower and upper edges
    for slope, icpt in ((0.0, 0.0), (C1 / 2.0, 0.0), (0.0, eps / 2.0), (-C1 / 2.0, C1 / 2.0)):
        # (x - xc)^2 + (slope x + icpt - tc)^2 = r2
        qa = 1.0 + slope * slope
        qb = -2.0 * xc + 2.0 * slope * (icpt - tc)
        qc = xc * xc + (icpt - tc) ** 2 - r2
        disc = qb * qb - 4.0 * qa * qc
        if disc > 0:
            for root in ((-qb - math.sqrt(disc)) / (2 * qa), (-qb + math.sqrt(disc)) / (2 * qa)):
                if x0 < root < x1:
                    brk.add(root)
    brk = sorted(brk)

    def integrand(x):
        c = chord_len(x)
        if c == 0.0:
            return np.zeros(3)
        w = float(field.local(x))
        return np.array([c, c * w, c * w**q])

    # the chord has square-root ends at circle tangencies; a cosine map smooths them
    out = np.zeros(3)
    coarse = np.zeros(3)
    for lo, hi in zip(brk[:-1], brk[1:]):
        if hi - lo <= 1e-15:
            continue
        for rule, acc in ((_COS_RULE_FINE, out), (_COS_RULE_COARSE, coarse)):
            nodes, wts = rule
            xs = lo + (hi - lo) * nodes
            acc += (hi - lo) * sum(wk * integrand(xk) for xk, wk in zip(xs, wts))
    err = np.abs(out - coarse)
    if np.any(err > 1e-6 * np.maximum(np.abs(out), 1e-300)):
        raise QuadratureFailure(f"relative error {float(np.max(err / np.maximum(np.abs(out), 1e-300))):.2e}")
    s = L * L
    return out[0] * s, out[1] * s, out[2] * s


@dataclass
class BallResult:
    center: tuple
    radius: float
    product: float
    area_fiber: float
    kind: str


def _collar_midpoints(geom: DomainGeometry) -> np.ndarray:
    cached = getattr(geom, "_collar_mid_cache", None)
    if cached is None:
        cached = np.array([col.float_edge().mean(axis=0) for col in geom.collars])
        geom._collar_mid_cache = cached
    return cached


def ball_product(field: WeightField, center, radius: float, mode: str = "restricted") -> BallResult:
    """``(avg w) * (avg w**(-1/(p-1)))**(p-1)`` over one ball.

    ``mode="restricted"`` averages over the part of the ball inside the inner
    fiber; ``mode="one"`` extends the weight by 1 and averages over the whole ball.
    """
    p = field.p
    q = -1.0 / (p - 1.0)
    geom = field.geometry
    L = geom.edge_length
    c = np.asarray(center, dtype=float)
    area = iw = iq = 0.0
    reach = radius + L
    mids = _collar_midpoints(geom)
    near = np.flatnonzero(np.linalg.norm(mids - c, axis=1) <= reach)
    for k in near:
        col = geom.collars[int(k)]
        a0, a1, a2 = _collar_ball_integrals(col, field, c, radius, q)
        area += a0
        iw += a1
        iq += a2
    if mode == "one":
        ball = math.pi * radius * radius
        rest = max(ball - area, 0.0)
        avg_w = (iw + rest) / ball
        avg_q = (iq + rest) / ball
    elif mode == "restricted":
        if area <= 0.0:
            raise ValueError("ball does not meet the fiber")
        avg_w, avg_q = iw / area, iq / area
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return BallResult(tuple(c.tolist()), radius, avg_w * avg_q ** (p - 1.0), area, "")


def ball_sample(geom: DomainGeometry, n_collars: int = 6, n_random: int = 3, seed: int = 0) -> list[tuple]:
    """Scale-covariant ball centers and radii: ``(center, radius, kind)``.

    Radii are multiples of the level's edge length; centers sit at a collar
    corner, the corner/middle junction, the middle, and random inner-band points.
    """
    rng = np.random.default_rng(seed)
    L = geom.edge_length
    eps = geom.eps_float
    a = eps / C1
    radii = [eps / 8.0, eps / 2.0, 2.0 * eps, a, 0.5]
    picks = rng.choice(len(geom.collars), size=min(n_collars, len(geom.collars)), replace=False)
    out = []
    for k in sorted(int(i) for i in picks):
        col = geom.collars[k]
        spots = [("corner", (0.0, 0.0)), ("junction", (a, eps / 4.0)), ("middle", (0.5, eps / 4.0))]
        for _ in range(n_random):
            x = float(rng.uniform(0.0, 1.0))
            t = float(rng.uniform(0.0, 1.0)) * float(inner_depth(x, eps))
            spots.append(("random", (x, t)))
        for kind, loc in spots:
            center = col.to_plane(np.array(loc))
            for r in radii:
                out.append((tuple(center.tolist()), r * L, kind))
    return out


@dataclass
class MuckenhouptReport:
    supremum: float
    argmax: BallResult | None
    rows: list
    skipped: int
    mode: str


def muckenhoupt_diagnostic(field: WeightField, sample=None, mode: str = "restricted", seed: int = 0) -> MuckenhouptReport:
    """Sampled supremum of the A_p product over balls (see ``ball_product``)."""
    if sample is None:
        sample = ball_sample(field.geometry, seed=seed)
    rows = []
    skipped = 0
    best = None
    for center, radius, kind in sample:
        try:
            res = ball_product(field, center, radius, mode)
        except (QuadratureFailure, ValueError) as exc:
            skipped += 1
            warnings.warn(f"ball at {center} r={radius:.3g} skipped: {exc}", RuntimeWarning, stacklevel=2)
            continue
        res.kind = kind
        rows.append(res)
        if best is None or res.product > best.product:
            best = res
    return MuckenhouptReport(best.product if best else float("nan"), best, rows, skipped, mode)


__all__ = [
    "EPS0",
    "unit_profile",
    "profile_jump_ratio",
    "local_weight",
    "WeightField",
    "ConductivityField",
    "weight_at",
    "conductivity_at",
    "ball_product",
    "ball_sample",
    "muckenhoupt_diagnostic",
    "PointOutsideFiber",
    "PointOutsideDomain",
]
