"""Interpolation on the lattice, the fiber extension, recovery functions and normal averages."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import spsolve

from .fem import DiscreteFunctional, FemFunction
from .fractal_energy import TraceValues, cell_graph, energy_scale, fill_apexes
from .geometry import C1, Constants, DomainGeometry, build_domain, check_amplitude, inner_depth
from .mesh import TAG_ANNULUS, TAG_FIBER, Mesh, MeshParams, mesh_fibered_domain, mesh_omega_star
from .weights import ConductivityField, WeightField, unit_profile

log = logging.getLogger(__name__)

SQ3 = math.sqrt(3.0)


class NormalExitsPatch(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# I_n


@lru_cache(maxsize=8)
def _lattice_frame(n: int):
    """Level-n lattice mesh of the outer triangle, with a dense (i, j) -> node table."""
    mesh = mesh_omega_star(n)
    N = 3**n
    table = np.full((2 * N + 1, 2 * N + 1), -1, dtype=np.int64)
    lat = mesh.lattice_node
    table[lat[:, 0] + N, lat[:, 1] + N] = np.arange(len(lat))
    return mesh, table


@dataclass(frozen=True, eq=False)
class LatticeInterpolant:
    """Continuous function, affine on every level-n lattice triangle of the outer triangle."""

    level: int
    values: np.ndarray  # one per lattice node of the level-n mesh

    @property
    def mesh(self) -> Mesh:
        return _lattice_frame(self.level)[0]

    def node_value(self, ij) -> float:
        N = 3**self.level
        return float(self.values[_lattice_frame(self.level)[1][ij[0] + N, ij[1] + N]])

    def node_values(self, ij: np.ndarray) -> np.ndarray:
        N = 3**self.level
        idx = _lattice_frame(self.level)[1][ij[:, 0] + N, ij[:, 1] + N]
        if np.any(idx < 0):
            raise ValueError("lattice point outside the outer triangle")
        return self.values[idx]

    def evaluate(self, xy: np.ndarray, outside: float = np.nan) -> np.ndarray:
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        N = 3**self.level
        _, table = _lattice_frame(self.level)
        rj = xy[:, 1] * (2.0 / SQ3) * N
        ri = xy[:, 0] * N - 0.5 * rj
        i = np.floor(ri).astype(np.int64)
        j = np.floor(rj).astype(np.int64)
        fa, fb = ri - i, rj - j
        up = fa + fb < 1.0
        ci = np.stack([np.where(up, i, i + 1), i + 1, i], axis=1)
        cj = np.stack([j, np.where(up, j, j + 1), j + 1], axis=1)
        w = np.stack([
            np.where(up, 1.0 - fa - fb, 1.0 - fb),
            np.where(up, fa, fa + fb - 1.0),
            np.where(up, fb, 1.0 - fa),
        ], axis=1)
        ok = (ci >= -N) & (ci <= N) & (cj >= -N) & (cj <= N)
        idx = np.where(ok, table[np.clip(ci + N, 0, 2 * N), np.clip(cj + N, 0, 2 * N)], -1)
        # on the outer boundary the floor may pick a cell whose missing corner has zero weight
        unused = (idx < 0) & (np.abs(w) <= 1e-12)
        inside = np.all((idx >= 0) | unused, axis=1)
        w = np.where(unused, 0.0, w)
        idx = np.where(unused, 0, idx)
        out = np.full(len(xy), float(outside))
        out[inside] = np.einsum("ij,ij->i", w[inside], self.values[idx[inside]])
        return out

    def holder_constant(self, beta: float, sample: int | None = None, seed: int = 0) -> float:
        """``max |I u(P) - I u(Q)| / |P - Q|**beta`` over lattice node pairs (all, or a sample)."""
        pts = self.mesh.points
        v = self.values
        m = len(pts)
        if sample is None or sample * sample >= m * m:
            best = 0.0
            for s in range(0, m, 1024):
                d = np.linalg.norm(pts[s:s + 1024, None] - pts[None], axis=-1)
                dv = np.abs(v[s:s + 1024, None] - v[None])
                with np.errstate(divide="ignore", invalid="ignore"):
                    q = np.where(d > 0, dv / d**beta, 0.0)
                best = max(best, float(q.max()))
            return best
        rng = np.random.default_rng(seed)
        a = rng.integers(0, m, sample)
        b = rng.integers(0, m, sample)
        d = np.linalg.norm(pts[a] - pts[b], axis=1)
        keep = d > 0
        return float(np.max(np.abs(v[a] - v[b])[keep] / d[keep] ** beta))


def _harmonic_fill(n: int, fixed_idx: np.ndarray, fixed_vals: np.ndarray) -> np.ndarray:
    """P1 Laplace extension on the level-n lattice mesh with the given nodes held fixed."""
    mesh, _ = _lattice_frame(n)
    gphi, area = mesh.gradients
    ke = np.einsum("eik,ejk->eij", gphi, gphi) * area[:, None, None]
    t = mesh.triangles
    K = coo_matrix((ke.ravel(), (np.repeat(t, 3, axis=1).ravel(), np.tile(t, (1, 3)).ravel())),
                   shape=(mesh.n_vertices,) * 2).tocsr()
    u = np.zeros(mesh.n_vertices)
    u[fixed_idx] = fixed_vals
    free = np.setdiff1d(np.arange(mesh.n_vertices), fixed_idx)
    if len(free):
        rhs = -K[free][:, fixed_idx] @ fixed_vals
        u[free] = spsolve(K[free][:, free].tocsc(), rhs)
    return u


def interpolate_In(u, n: int) -> LatticeInterpolant:
    """Piecewise-affine interpolant on the level-n lattice.

    ``u`` is a callable ``u(x, y)`` evaluated at every lattice node, or a
    TraceValues of level ``n`` whose graph-node values are kept and whose other
    lattice nodes receive the discrete harmonic extension.
    """
    mesh, table = _lattice_frame(n)
    N = 3**n
    if isinstance(u, TraceValues):
        if u.graph.level != n:
            raise ValueError(f"trace level {u.graph.level} != {n}")
        gn = u.graph.lattice_nodes
        idx = table[gn[:, 0] + N, gn[:, 1] + N]
        vals = _harmonic_fill(n, idx, u.values)
        return LatticeInterpolant(n, vals)
    xy = mesh.points
    vals = np.asarray(u(xy[:, 0], xy[:, 1]), dtype=float) * np.ones(len(xy))
    return LatticeInterpolant(n, vals)


# ---------------------------------------------------------------------------
# G_eps on the unit cell


_UNIT = {
    # side: (P, Q, opposite vertex of the host triangle)
    1: ((0.0, 0.0), (1.0, 0.0), (0.5, -SQ3 / 2.0)),
    2: ((1.0, 0.0), (0.5, SQ3 / 2.0), (1.5, SQ3 / 2.0)),
    3: ((0.5, SQ3 / 2.0), (0.0, 0.0), (-0.5, SQ3 / 2.0)),
}


def _unit_local(side: int, xy: np.ndarray):
    p, q, _ = (np.array(v) for v in _UNIT[side])
    ex = q - p
    ey = np.array([ex[1], -ex[0]])
    d = xy - p
    return d @ ex, d @ ey


def _unit_plane(side: int, x, t):
    p, q, _ = (np.array(v) for v in _UNIT[side])
    ex = q - p
    ey = np.array([ex[1], -ex[0]])
    return p + np.multiply.outer(x, ex) + np.multiply.outer(t, ey)


def extend_G_eps(g, eps):
    """The fiber extension of ``g`` around the unit cell.

    Returns a callable ``G(x, y)``: ``g`` off the outer collars; inside the inner
    band of side ``l`` the affine interpolant ``I_0 g`` (on the side's host
    triangle) at the normal projection; blended on the annulus with
    ``t g(I_0 projection) + (1 - t) g(Q~)``.
    """
    e = float(check_amplitude(eps))
    a = e / C1

    def corners(side):
        p, q, r = _UNIT[side]
        return (float(g(*p)), float(g(*q)), float(g(*r)))

    vals = {s: corners(s) for s in (1, 2, 3)}

    def G(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        shape = np.broadcast(x, y).shape
        xy = np.stack([np.broadcast_to(x, shape).ravel(), np.broadcast_to(y, shape).ravel()], axis=1)
        out = np.array([float(g(px, py)) for px, py in xy])
        done = np.zeros(len(xy), dtype=bool)
        for side in (1, 2, 3):
            lx, lt = _unit_local(side, xy)
            inside = (~done) & (lx >= 0.0) & (lx <= 1.0) & (lt >= 0.0)
            if not np.any(inside):
                continue
            xs = lx[inside]
            d_in = inner_depth(xs, e)
            d_out = 2.0 * d_in
            ts = lt[inside]
            in_collar = ts <= d_out
            gp, gq, gr = vals[side]
            lin = (1.0 - xs) * gp + xs * gq
            res = out[inside]
            inner = in_collar & (ts <= d_in)
            res[inner] = lin[inner]
            ann = in_collar & (ts > d_in)
            if np.any(ann):
                qt = _unit_plane(side, xs[ann], d_out[ann])
                gq_t = np.array([float(g(px, py)) for px, py in np.atleast_2d(qt)])
                tau = (d_out[ann] - ts[ann]) / (d_out[ann] - d_in[ann])
                res[ann] = tau * lin[ann] + (1.0 - tau) * gq_t
            out[inside] = res
            done[np.flatnonzero(inside)[in_collar]] = True
        return out.reshape(shape) if shape else float(out[0])

    G.eps = e
    G.a = a
    return G


def i0_on_side(values, side: int):
    """Affine interpolant of (g(P), g(Q), g(opposite)) on the host triangle of ``side``."""
    gp, gq, gr = values
    p, q, r = (np.array(v) for v in _UNIT[side])
    m = np.array([[p[0], p[1], 1.0], [q[0], q[1], 1.0], [r[0], r[1], 1.0]])
    coef = np.linalg.solve(m, np.array([gp, gq, gr], dtype=float))
    return lambda x, y: coef[0] * np.asarray(x) + coef[1] * np.asarray(y) + coef[2]


# ---------------------------------------------------------------------------
# recovery functions


@dataclass(eq=False)
class RecoveryFunction:
    function: FemFunction
    interpolant: LatticeInterpolant
    level: int
    eps: float
    source: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def mesh(self) -> Mesh:
        return self.function.mesh


def recovery_values(mesh: Mesh, interp: LatticeInterpolant) -> np.ndarray:
    """Nodal values of the recovery function on a fibered mesh of the same level."""
    if mesh.kind != "fibered":
        raise ValueError("recovery functions live on fibered meshes")
    eps = mesh.eps
    geom = mesh.geometry
    vals = interp.evaluate(mesh.points)
    # fiber and annulus vertices from their collar's local coordinates
    for tag in (TAG_ANNULUS, TAG_FIBER):
        idx = np.flatnonzero(mesh.region == tag)
        if len(idx) == 0:
            continue
        col = mesh.collar[idx]
        ends = np.array([[c.edge[0], c.edge[1], c.opposite_vertex()] for c in geom.collars], dtype=np.int64)
        up = interp.node_values(ends[:, 0])
        uq = interp.node_values(ends[:, 1])
        ur = interp.node_values(ends[:, 2])
        loc = mesh.local[idx]
        x = np.clip(loc[..., 0], 0.0, 1.0)
        t = loc[..., 1]
        lin = (1.0 - x) * up[col][:, None] + x * uq[col][:, None]
        if tag == TAG_FIBER:
            v = lin
        else:
            slope = (ur[col] - 0.5 * (up[col] + uq[col])) / (SQ3 / 2.0)  # d/dt of I_n u in local units
            d_in = inner_depth(x, eps)
            d_out = 2.0 * d_in
            with np.errstate(divide="ignore", invalid="ignore"):
                tau = np.where(d_out > d_in, (d_out - t) / (d_out - d_in), 1.0)
            v = lin + (1.0 - tau) * d_out * slope[:, None]
        tris = mesh.triangles[idx]
        vals[tris.ravel()] = v.ravel()
    if not np.all(np.isfinite(vals)):
        raise ValueError("recovery values are not finite (mesh outside the outer triangle?)")
    return vals


def recovery_sequence(u, n: int, eps, mesh: Mesh | None = None, params: MeshParams | None = None,
                      geometry: DomainGeometry | None = None) -> RecoveryFunction:
    """``u_n``: ``I_n u`` in the bulk, constant along normals on the inner fiber, blended on the annulus."""
    e = float(check_amplitude(eps))
    if mesh is None:
        geometry = geometry or build_domain(n, eps)
        mesh = mesh_fibered_domain(geometry, params)
    if mesh.level != n:
        raise ValueError(f"mesh level {mesh.level} != {n}")
    interp = interpolate_In(u, n)
    vals = recovery_values(mesh, interp)
    src = "trace" if isinstance(u, TraceValues) else getattr(u, "__name__", "callable")
    return RecoveryFunction(FemFunction(mesh, vals), interp, n, e, src)


def fiber_identity(rec: RecoveryFunction, p: float, semantics: str = "set") -> dict:
    """Both sides of the weighted-fiber / cell-energy identity for a recovery function.

    ``lhs = delta^(1-p)/p int w |grad u_n|^p``; ``rhs = (1 + eps C_p/C1) * 4^(n(p-1))/p * sum |du|^p``
    over unordered vertex pairs of the cell triangles (distinct ones for ``set``).
    """
    mesh = rec.mesh
    cond = ConductivityField(WeightField(mesh.geometry, p), semantics)
    fun = DiscreteFunctional(mesh, p, cond)
    lhs = fun.breakdown(rec.function.values).fiber_weighted
    g = cell_graph(rec.level, "all-pairs-unordered", semantics)
    tv = rec.interpolant.node_values(g.lattice_nodes)
    pr = g.pairs()
    cell = energy_scale(rec.level, p) * float(np.sum(np.abs(tv[pr[:, 0]] - tv[pr[:, 1]]) ** p))
    factor = Constants(p).fiber_factor(rec.eps)
    rhs = factor * cell
    rel = abs(lhs - rhs) / abs(rhs) if rhs != 0 else abs(lhs)
    return {"lhs": lhs, "rhs": rhs, "cell_energy": cell, "factor": factor, "relative_error": rel}


# ---------------------------------------------------------------------------
# M_eps and v~


def _collar_elements(mesh: Mesh, collar: int):
    cache = getattr(mesh, "_collar_elems", None)
    if cache is None:
        fib = np.flatnonzero(mesh.region == TAG_FIBER)
        order = np.argsort(mesh.collar[fib], kind="stable")
        fib = fib[order]
        starts = np.searchsorted(mesh.collar[fib], np.arange(len(mesh.collar_frames) + 1))
        cache = (fib, starts)
        mesh._collar_elems = cache
    fib, starts = cache
    return fib[starts[collar]:starts[collar + 1]]


def _normal_integrals(loc: np.ndarray, vals: np.ndarray, xs: np.ndarray, ell: np.ndarray):
    """Exact integrals of piecewise-affine data along ``{x} x [0, ell]`` and the covered length."""
    m = len(xs)
    total = np.zeros(m)
    covered = np.zeros(m)
    xmin = loc[..., 0].min(axis=1)
    xmax = loc[..., 0].max(axis=1)
    for k in range(m):
        x = xs[k]
        sel = np.flatnonzero((xmin <= x) & ((x < xmax) | ((x == xmax) & (x >= 1.0))))
        for e in sel:
            P = loc[e]
            V = vals[e]
            ts, vs = [], []
            for i in range(3):
                j = (i + 1) % 3
                x0, x1 = P[i, 0], P[j, 0]
                if x0 == x1:
                    if x0 == x:
                        ts.extend([P[i, 1], P[j, 1]])
                        vs.extend([V[i], V[j]])
                    continue
                s = (x - x0) / (x1 - x0)
                if -1e-14 <= s <= 1.0 + 1e-14:
                    ts.append(P[i, 1] + s * (P[j, 1] - P[i, 1]))
                    vs.append(V[i] + s * (V[j] - V[i]))
            if len(ts) < 2:
                continue
            ts = np.array(ts)
            vs = np.array(vs)
            lo, hi = ts.argmin(), ts.argmax()
            t0, t1 = ts[lo], ts[hi]
            if t1 <= t0:
                continue
            a, b = max(t0, 0.0), min(t1, ell[k])
            if b <= a:
                continue
            va = vs[lo] + (a - t0) / (t1 - t0) * (vs[hi] - vs[lo])
            vb = vs[lo] + (b - t0) / (t1 - t0) * (vs[hi] - vs[lo])
            total[k] += 0.5 * (va + vb) * (b - a)
            covered[k] += b - a
    return total, covered


def average_M_eps(v: FemFunction, collar: int, p: float, xs=None) -> tuple[np.ndarray, np.ndarray]:
    """Normal averages of ``v`` over the collar's inner band: ``(abscissas, averages)``.

    The segment at abscissa ``x`` has unit-frame length ``unit_profile(x)``; at
    ``x = 0, 1`` the average is the nodal value at the corner.
    """
    mesh = v.mesh
    eps = mesh.eps
    elems = _collar_elements(mesh, collar)
    loc = mesh.local[elems]
    vals = v.values[mesh.triangles[elems]]
    if xs is None:
        cols = np.unique(loc[..., 0].ravel())
        gl, _ = np.polynomial.legendre.leggauss(4)
        mids = [0.5 * (a + b) + 0.5 * (b - a) * gl for a, b in zip(cols[:-1], cols[1:])]
        xs = np.unique(np.concatenate([cols, *mids]))
    xs = np.asarray(xs, dtype=float)
    inner = (xs > 0.0) & (xs < 1.0)
    out = np.empty(len(xs))
    ell = np.asarray(unit_profile(np.clip(xs, 0.0, 1.0), eps, p), dtype=float) * np.ones(len(xs))
    if np.any(inner):
        tot, cov = _normal_integrals(loc, vals, xs[inner], ell[inner])
        if np.any(np.abs(cov - ell[inner]) > 1e-9 * np.maximum(ell[inner], 1e-300)):
            k = int(np.flatnonzero(np.abs(cov - ell[inner]) > 1e-9 * ell[inner])[0])
            raise NormalExitsPatch(f"normal segment at x={xs[inner][k]!r} not covered by collar {collar}")
        out[inner] = tot / ell[inner]
    col = mesh.geometry.collars[collar]
    ends = mesh.vertex_of_lattice()
    out[xs <= 0.0] = v.values[ends[col.edge[0]]]
    out[xs >= 1.0] = v.values[ends[col.edge[1]]]
    return xs, out


@dataclass
class VTilde:
    level: int
    p: float
    curve_values: np.ndarray  # on the K_n vertices, traversal order
    profiles: dict  # collar index -> (abscissas, averages)

    def trace(self, convention: str = "edges-only", semantics: str = "set") -> TraceValues:
        """Values on the level-n cell graph; apexes get the all-pairs minimizer."""
        return fill_apexes(cell_graph(self.level, convention, semantics), self.curve_values, self.p)


def v_tilde(v: FemFunction, p: float, profiles: bool = False) -> VTilde:
    """Averaged trace of ``v`` on the K_n vertices (and optional per-segment profiles)."""
    mesh = v.mesh
    geom = mesh.geometry
    n = mesh.level
    ends = mesh.vertex_of_lattice()
    verts = geom.curve.lattice_vertices
    curve_vals = np.array([v.values[ends[tuple(c)]] for c in verts])
    prof = {}
    if profiles:
        kn = geom.curve_edges
        for col in geom.collars:
            if frozenset(col.edge) in kn:
                prof[col.index] = average_M_eps(v, col.index, p)
    return VTilde(n, p, curve_vals, prof)


def liminf_sides(v: FemFunction, p: float, semantics: str = "set") -> dict:
    """Edges-convention energy of the averaged trace against the weighted fiber energy of ``v``."""
    mesh = v.mesh
    n = mesh.level
    vt = v_tilde(v, p)
    d = np.diff(np.append(vt.curve_values, vt.curve_values[0]))
    lhs = energy_scale(n, p) * float(np.sum(np.abs(d) ** p))
    cond = ConductivityField(WeightField(mesh.geometry, p), semantics)
    rhs = DiscreteFunctional(mesh, p, cond).breakdown(v.values).fiber_weighted
    return {"lhs": lhs, "rhs": rhs, "slack": rhs - lhs}


__all__ = [
    "LatticeInterpolant",
    "interpolate_In",
    "extend_G_eps",
    "i0_on_side",
    "RecoveryFunction",
    "recovery_sequence",
    "recovery_values",
    "fiber_identity",
    "average_M_eps",
    "VTilde",
    "v_tilde",
    "liminf_sides",
    "NormalExitsPatch",
]
