"""P1 functions on tagged meshes and the weighted p-energy functionals."""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import shapely
from scipy.sparse import coo_matrix, csr_matrix

from . import kernels
from .mesh import TAG_ANNULUS, TAG_BULK, TAG_FIBER, Mesh
from .quadrature import triangle_rule
from .weights import ConductivityField, WeightField

REGIONS = {"bulk": TAG_BULK, "fiber": TAG_FIBER, "annulus": TAG_ANNULUS}
CHUNK = 1 << 16


class NonFiniteValue(ValueError):
    pass


class MissingRegion(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FemFunction:
    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.mesh.n_vertices,):
            raise ValueError(f"expected {self.mesh.n_vertices} nodal values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise NonFiniteValue("nodal values must be finite")
        object.__setattr__(self, "values", v)

    def __add__(self, other: "FemFunction") -> "FemFunction":
        _same_mesh(self, other)
        return FemFunction(self.mesh, self.values + other.values)

    def __sub__(self, other: "FemFunction") -> "FemFunction":
        _same_mesh(self, other)
        return FemFunction(self.mesh, self.values - other.values)

    def __mul__(self, c: float) -> "FemFunction":
        return FemFunction(self.mesh, float(c) * self.values)

    __rmul__ = __mul__

    def gradients(self) -> np.ndarray:
        gphi = self.mesh.gradients[0]
        return np.einsum("eij,ei->ej", gphi, self.values[self.mesh.triangles])

    def evaluate(self, xy: np.ndarray, outside: float = 0.0) -> np.ndarray:
        """Point values; points outside the mesh get ``outside``."""
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        tri = locate_points(self.mesh, xy)
        out = np.full(len(xy), float(outside))
        ok = tri >= 0
        if np.any(ok):
            lam = barycentric(self.mesh, tri[ok], xy[ok])
            out[ok] = np.einsum("ij,ij->i", lam, self.values[self.mesh.triangles[tri[ok]]])
        return out

    def to_json(self) -> dict:
        return {"mesh_id": mesh_id(self.mesh), "values": [float(v) for v in self.values]}


def _same_mesh(a: FemFunction, b: FemFunction):
    if a.mesh is not b.mesh:
        raise ValueError("functions live on different meshes")


def mesh_id(mesh: Mesh) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(mesh.points).tobytes())
    h.update(np.ascontiguousarray(mesh.triangles).tobytes())
    return h.hexdigest()[:16]


def locate_points(mesh: Mesh, xy: np.ndarray) -> np.ndarray:
    finder = getattr(mesh, "_trifinder", None)
    if finder is None:
        from matplotlib.tri import Triangulation

        finder = Triangulation(mesh.points[:, 0], mesh.points[:, 1], mesh.triangles).get_trifinder()
        mesh._trifinder = finder
    return np.asarray(finder(xy[:, 0], xy[:, 1]), dtype=np.int64)


def barycentric(mesh: Mesh, tri: np.ndarray, xy: np.ndarray) -> np.ndarray:
    p = mesh.points[mesh.triangles[tri]]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    r = xy - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    l1 = (r[:, 0] * d2[:, 1] - r[:, 1] * d2[:, 0]) / det
    l2 = (d1[:, 0] * r[:, 1] - d1[:, 1] * r[:, 0]) / det
    return np.stack([1.0 - l1 - l2, l1, l2], axis=1)


def _call(f, x, y):
    try:
        v = np.asarray(f(x, y), dtype=float)
    except TypeError:
        v = np.array([float(f(a, b)) for a, b in zip(np.ravel(x), np.ravel(y))])
    if v.ndim == 0:
        v = np.full(np.shape(x), float(v))
    return np.broadcast_to(v, np.shape(x)).astype(float)


def interpolate_nodal(f, mesh: Mesh) -> FemFunction:
    vals = _call(f, mesh.points[:, 0], mesh.points[:, 1])
    if not np.all(np.isfinite(vals)):
        bad = int(np.flatnonzero(~np.isfinite(vals))[0])
        raise NonFiniteValue(f"non-finite sample at vertex {bad} {tuple(mesh.points[bad])}")
    return FemFunction(mesh, vals)


# ---------------------------------------------------------------------------
# weights on elements


def weight_integrals(mesh: Mesh, weight: WeightField) -> np.ndarray:
    """Exact integral of the fiber weight over every fiber element (0 elsewhere)."""
    out = np.zeros(mesh.n_triangles)
    if mesh.collar is None:
        return out
    fib = np.flatnonzero(mesh.region == TAG_FIBER)
    if len(fib) == 0:
        return out
    coeffs = weight.piece_coefficients()
    areas = mesh.areas[fib]
    unit_area = areas * 9.0**mesh.level  # area in collar-local units
    pc = mesh.piece[fib]
    x = mesh.local[fib, :, 0]
    L2 = 9.0**-mesh.level
    for code, name in enumerate(("T1", "R", "T2")):
        sel = pc == code
        if not np.any(sel):
            continue
        kind, c = coeffs[name]
        if kind == "const":
            out[fib[sel]] = c * areas[sel]
        else:
            s = x[sel] if name == "T1" else 1.0 - x[sel]
            s = np.clip(s, 0.0, None)
            out[fib[sel]] = c * L2 * kernels.inv_x_integral(s, unit_area[sel])
    return out


def conductivity_coefficients(mesh: Mesh, conductivity=None, regions=("bulk", "fiber", "annulus")) -> np.ndarray:
    """``c_e = int_e a`` per element, restricted to ``regions``.

    ``conductivity`` is a ConductivityField, or ``None``/``"unit"`` for ``a = 1``.
    """
    tags = _region_mask(mesh, regions)
    c = mesh.areas.copy()
    if isinstance(conductivity, ConductivityField):
        fib = mesh.region == TAG_FIBER
        wi = weight_integrals(mesh, conductivity.weight)
        mult = mesh.element_multiplicity() if conductivity.semantics == "multiset" else np.ones(mesh.n_triangles)
        c[fib] = conductivity.prefactor * mult[fib] * wi[fib]
    elif conductivity not in (None, "unit"):
        raise TypeError("conductivity must be a ConductivityField, 'unit' or None")
    c[~tags] = 0.0
    return c


def _region_mask(mesh: Mesh, regions) -> np.ndarray:
    if regions is None:
        return np.ones(mesh.n_triangles, dtype=bool)
    mask = np.zeros(mesh.n_triangles, dtype=bool)
    for name in regions:
        if name not in REGIONS:
            raise MissingRegion(f"unknown region {name!r}")
        mask |= mesh.region == REGIONS[name]
    present = set(np.unique(mesh.region).tolist())
    if not any(REGIONS[r] in present for r in regions):
        raise MissingRegion(f"mesh carries none of the regions {tuple(regions)}")
    return mask


def _chunks(n: int):
    return [(a, min(a + CHUNK, n)) for a in range(0, n, CHUNK)]


def _map_chunks(fn, n: int, threads: int):
    spans = _chunks(n)
    if threads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(fn, spans))
    else:
        parts = [fn(s) for s in spans]
    return parts


def _dirichlet_elems(mesh, coef, u, p, eta, hess, threads):
    gphi = mesh.gradients[0]
    tris = mesh.triangles

    def run(span):
        a, b = span
        return kernels.p_dirichlet(gphi[a:b], tris[a:b], coef[a:b], u, p, eta, hess)

    return _cat(_map_chunks(run, len(tris), threads), hess)


def _mass_elems(mesh, area, u, p, eta, hess, threads, degree):
    bary, qw = triangle_rule(degree)
    tris = mesh.triangles

    def run(span):
        a, b = span
        return kernels.p_mass(tris[a:b], area[a:b], bary, qw, u, p, eta, hess)

    return _cat(_map_chunks(run, len(tris), threads), hess)


def _cat(parts, hess):
    if not parts:
        return np.zeros(0), np.zeros((0, 3)), (np.zeros((0, 3, 3)) if hess else None)
    e = np.concatenate([q[0] for q in parts])
    g = np.concatenate([q[1] for q in parts])
    h = np.concatenate([q[2] for q in parts]) if hess else None
    return e, g, h


def mass_degree(p: float) -> int:
    return int(math.ceil(p)) + 2


def p_energy(u: FemFunction, regions=("bulk", "fiber", "annulus"), conductivity=None, p: float = 2.0) -> float:
    """``int a |grad u|^p`` over the requested regions (no ``1/p``)."""
    coef = conductivity_coefficients(u.mesh, conductivity, regions)
    e, _, _ = _dirichlet_elems(u.mesh, coef, u.values, p, 0.0, False, 1)
    return float(p * np.sum(e))


def lp_mass(u: FemFunction, p: float = 2.0, regions=None) -> float:
    """``int |u|^p`` over the requested regions (all by default)."""
    mask = _region_mask(u.mesh, regions)
    area = np.where(mask, u.mesh.areas, 0.0)
    deg = 2 if p == 2.0 else mass_degree(p)
    e, _, _ = _mass_elems(u.mesh, area, u.values, p, 0.0, False, 1, deg)
    return float(p * np.sum(e))


def load_vector(mesh: Mesh, f, regions=None, degree: int = 4) -> np.ndarray:
    """``b_i = int f phi_i``."""
    if f is None:
        return np.zeros(mesh.n_vertices)
    mask = _region_mask(mesh, regions)
    bary, qw = triangle_rule(max(degree, 4))
    pts = np.einsum("mk,ekd->emd", bary, mesh.points[mesh.triangles])
    fv = _call(f, pts[..., 0], pts[..., 1])
    if not np.all(np.isfinite(fv)):
        raise NonFiniteValue("load integrand is not finite")
    area = np.where(mask, mesh.areas, 0.0)
    ge = area[:, None] * ((fv * qw) @ bary)
    return np.bincount(mesh.triangles.ravel(), weights=ge.ravel(), minlength=mesh.n_vertices)


def load(u: FemFunction, f, regions=None) -> float:
    return float(load_vector(u.mesh, f, regions) @ u.values)


# ---------------------------------------------------------------------------
# functional


@dataclass
class EnergyBreakdown:
    lp_mass: float
    bulk_dirichlet: float
    annulus_dirichlet: float
    fiber_weighted: float
    boundary_energy: float = 0.0  # graph term of the fractal problem

    @property
    def total(self) -> float:
        return self.lp_mass + self.bulk_dirichlet + self.annulus_dirichlet + self.fiber_weighted + self.boundary_energy

    def as_dict(self) -> dict:
        return {
            "lp_mass": self.lp_mass,
            "bulk_dirichlet": self.bulk_dirichlet,
            "annulus_dirichlet": self.annulus_dirichlet,
            "fiber_weighted": self.fiber_weighted,
            "boundary_energy": self.boundary_energy,
            "total": self.total,
        }


class DiscreteFunctional:
    """``1/p int |u|^p + 1/p int a |grad u|^p [+ graph term] - int f u`` on a mesh.

    ``pairs``/``pair_weight`` add ``sum w/p |u_j - u_i|^p`` over vertex pairs.
    With ``eta > 0`` the gradient norm is smoothed to ``(|grad u|^2 + eta^2)^(1/2)``;
    the mass Hessian uses the same smoothing while its value and gradient stay exact.
    """

    def __init__(self, mesh: Mesh, p: float, conductivity=None, f=None, pairs=None, pair_weight=None,
                 threads: int = 1):
        if p < 2.0:
            raise ValueError("exponent p must be >= 2")
        self.mesh = mesh
        self.p = float(p)
        self.threads = max(1, int(threads))
        self.conductivity = conductivity
        self.coef = conductivity_coefficients(mesh, conductivity, None)
        self.area = mesh.areas
        self.degree = 4 if self.p == 2.0 else mass_degree(self.p)
        self.b = load_vector(mesh, f)
        self.f = f
        if pairs is not None and len(pairs):
            self.pairs = np.asarray(pairs, dtype=np.int64)
            self.pair_weight = np.broadcast_to(np.asarray(pair_weight, dtype=float), (len(self.pairs),)).copy()
        else:
            self.pairs = None
            self.pair_weight = None
        t = mesh.triangles
        self._rows = np.repeat(t, 3, axis=1).ravel()
        self._cols = np.tile(t, (1, 3)).ravel()

    @property
    def n(self) -> int:
        return self.mesh.n_vertices

    def _pieces(self, u, eta, hess):
        d = _dirichlet_elems(self.mesh, self.coef, u, self.p, eta, hess, self.threads)
        m = _mass_elems(self.mesh, self.area, u, self.p, eta, hess, self.threads, self.degree)
        g = kernels.pair_p(self.pairs, self.pair_weight, u, self.p, eta, hess) if self.pairs is not None else None
        return d, m, g

    def breakdown(self, u, eta: float = 0.0) -> EnergyBreakdown:
        u = _vals(u)
        (de, _, _), (me, _, _), gp = self._pieces(u, eta, False)
        reg = self.mesh.region
        return EnergyBreakdown(
            lp_mass=float(np.sum(me)),
            bulk_dirichlet=float(np.sum(de[reg == TAG_BULK])),
            annulus_dirichlet=float(np.sum(de[reg == TAG_ANNULUS])),
            fiber_weighted=float(np.sum(de[reg == TAG_FIBER])),
            boundary_energy=float(np.sum(gp[0])) if gp is not None else 0.0,
        )

    def energy(self, u, eta: float = 0.0) -> float:
        """``Phi[u]`` without the load."""
        u = _vals(u)
        (de, _, _), (me, _, _), gp = self._pieces(u, eta, False)
        val = float(np.sum(de)) + float(np.sum(me))
        if gp is not None:
            val += float(np.sum(gp[0]))
        return val

    def value(self, u, eta: float = 0.0) -> float:
        u = _vals(u)
        return self.energy(u, eta) - float(self.b @ u)

    def gradient(self, u, eta: float = 0.0) -> np.ndarray:
        """First variation ``Phi'(u) - b`` as a nodal vector."""
        u = _vals(u)
        (_, dg, _), (_, mg, _), gp = self._pieces(u, eta, False)
        t = self.mesh.triangles.ravel()
        r = np.bincount(t, weights=dg.ravel(), minlength=self.n) + np.bincount(t, weights=mg.ravel(), minlength=self.n)
        if gp is not None:
            r += np.bincount(self.pairs.ravel(), weights=gp[1].ravel(), minlength=self.n)
        return r - self.b

    def hessian(self, u, eta: float = 0.0) -> csr_matrix:
        u = _vals(u)
        (_, _, dh), (_, _, mh), gp = self._pieces(u, eta, True)
        vals = (dh + mh).ravel()
        rows, cols = self._rows, self._cols
        if gp is not None:
            h = gp[2]
            a, b = self.pairs[:, 0], self.pairs[:, 1]
            rows = np.concatenate([rows, a, b, a, b])
            cols = np.concatenate([cols, a, b, b, a])
            vals = np.concatenate([vals, h, h, -h, -h])
        return coo_matrix((vals, (rows, cols)), shape=(self.n, self.n)).tocsr()


def _vals(u) -> np.ndarray:
    return u.values if isinstance(u, FemFunction) else np.asarray(u, dtype=float)


def first_variation(u: FemFunction, conductivity=None, f=None, p: float = 2.0, eta: float = 0.0) -> np.ndarray:
    return DiscreteFunctional(u.mesh, p, conductivity, f).gradient(u.values, eta)


def second_variation(u: FemFunction, conductivity=None, p: float = 2.0, eta: float = 0.0) -> csr_matrix:
    return DiscreteFunctional(u.mesh, p, conductivity).hessian(u.values, eta)


def energy_breakdown(u: FemFunction, conductivity=None, p: float = 2.0) -> EnergyBreakdown:
    return DiscreteFunctional(u.mesh, p, conductivity).breakdown(u.values)


# ---------------------------------------------------------------------------
# distances on the outer triangle




def _self_product(u: FemFunction) -> float:
    # exact for P1: the degree-2 rule integrates u^2 without error
    return float(np.sum(_quad_on_mesh(u.mesh, 2, lambda pts, bary: (u.values[u.mesh.triangles] @ bary.T) ** 2)))


def _quad_on_mesh(mesh: Mesh, degree: int, integrand) -> np.ndarray:
    bary, qw = triangle_rule(degree)
    corners = mesh.points[mesh.triangles]
    pts = np.einsum("mk,ekd->emd", bary, corners)
    vals = integrand(pts, bary)
    return mesh.areas * (vals @ qw)


def _polygons(mesh: Mesh):
    return shapely.polygons(mesh.points[mesh.triangles])


def _overlay(m1: Mesh, m2: Mesh):
    """Convex pieces of pairwise element intersections, fan-triangulated.

    Returns (tri corners (k,3,2), element of m1, element of m2) per fan triangle.
    """
    p1, p2 = _polygons(m1), _polygons(m2)
    i1, i2 = shapely.STRtree(p2).query(p1, predicate="intersects")
    inter = shapely.intersection(p1[i1], p2[i2])
    keep = (shapely.get_type_id(inter) == 3) & (shapely.area(inter) > 0)
    inter, i1, i2 = inter[keep], i1[keep], i2[keep]
    rings = shapely.get_exterior_ring(inter)
    coords, owner = shapely.get_coordinates(rings, return_index=True)
    counts = np.bincount(owner, minlength=len(inter)) - 1  # closing point repeats the first
    starts = np.concatenate(([0], np.cumsum(counts + 1)[:-1]))
    nfan = counts - 2
    poly = np.repeat(np.arange(len(inter)), nfan)
    j = np.arange(len(poly)) - np.repeat(np.cumsum(nfan) - nfan, nfan) + 1
    s0 = starts[poly]
    tri = np.stack([coords[s0], coords[s0 + j], coords[s0 + j + 1]], axis=1)
    return tri, i1[poly], i2[poly]


def _p1_at(u: FemFunction, elem: np.ndarray, pts: np.ndarray) -> np.ndarray:
    corners = u.mesh.points[u.mesh.triangles[elem]]
    g = u.mesh.gradients[0][elem]  # (k,3,2)
    vals = u.values[u.mesh.triangles[elem]]
    grad = np.einsum("kid,ki->kd", g, vals)
    return vals[:, 0, None] + np.einsum("kmd,kd->km", pts - corners[:, None, 0, :], grad)


def _cross_product(u1: FemFunction, u2: FemFunction) -> float:
    tri, e1, e2 = _overlay(u1.mesh, u2.mesh)
    bary, qw = triangle_rule(2)
    pts = np.einsum("mk,ekd->emd", bary, tri)
    d1, d2 = tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
    area = 0.5 * np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    prod = _p1_at(u1, e1, pts) * _p1_at(u2, e2, pts)
    return float(np.sum(area * (prod @ qw)))


def l2_distance_omega_star(u1: FemFunction | None, u2: FemFunction | None) -> float:
    """``||chi_1 u_1 - chi_2 u_2||`` in L2 of the outer triangle, zero-extended; ``None`` means 0.

    Squares are integrated on their own meshes and the cross term on the exact
    overlay of the two meshes, so every piece is a polynomial integrated without error.
    """
    if u1 is None and u2 is None:
        return 0.0
    if u1 is None or u2 is None:
        return math.sqrt(_self_product(u1 if u2 is None else u2))
    sq = _self_product(u1) + _self_product(u2) - 2.0 * _cross_product(u1, u2)
    return math.sqrt(max(sq, 0.0))


__all__ = [
    "FemFunction",
    "EnergyBreakdown",
    "DiscreteFunctional",
    "interpolate_nodal",
    "weight_integrals",
    "conductivity_coefficients",
    "p_energy",
    "lp_mass",
    "load",
    "load_vector",
    "first_variation",
    "second_variation",
    "energy_breakdown",
    "l2_distance_omega_star",
    "mesh_id",
    "NonFiniteValue",
    "MissingRegion",
]
