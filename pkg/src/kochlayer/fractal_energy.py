"""Discrete p-energies on the snowflake cell graphs, decimation and the boundary measure."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .geometry import (
    MAX_LEVEL,
    CellAddress,
    _curve_cells,
    _check_level,
    lattice_array_to_float,
    triangle_of_corners,
)

log = logging.getLogger(__name__)

PAIR_CONVENTIONS = ("all-pairs-unordered", "all-pairs-ordered", "edges-only")
SEMANTICS = ("multiset", "set")

D_F = math.log(4.0) / math.log(3.0)


class ConventionMismatch(ValueError):
    pass


class DecimationError(RuntimeError):
    pass


class BesovLevelError(ValueError):
    pass


def _check_convention(conv: str):
    if conv not in PAIR_CONVENTIONS:
        raise ValueError(f"unknown pair convention {conv!r}; expected one of {PAIR_CONVENTIONS}")


def _check_semantics(sem: str):
    if sem not in SEMANTICS:
        raise ValueError(f"unknown cell semantics {sem!r}; expected one of {SEMANTICS}")


@dataclass(frozen=True)
class CellGraph:
    """Nodes and cell triangles of level ``n`` over the three curves.

    ``triangles`` always holds the ``3 * 4**n`` cells in address order.  With
    ``semantics="set"`` energies count every distinct triangle once; with
    ``"multiset"`` every cell counts, so triangles shared by two cells count twice.
    """

    level: int
    lattice_nodes: np.ndarray  # (m, 2) int lattice coordinates
    triangles: np.ndarray  # (3*4**n, 3) node indices, (pA, pB, pC)
    addresses: tuple
    convention: str = "all-pairs-unordered"
    semantics: str = "multiset"

    def __post_init__(self):
        _check_convention(self.convention)
        _check_semantics(self.semantics)

    @property
    def n(self) -> int:
        return self.level

    @property
    def coords(self) -> np.ndarray:
        return lattice_array_to_float(self.lattice_nodes, self.level)

    @property
    def n_nodes(self) -> int:
        return len(self.lattice_nodes)

    def with_convention(self, convention: str) -> "CellGraph":
        return CellGraph(self.level, self.lattice_nodes, self.triangles, self.addresses, convention, self.semantics)

    def with_semantics(self, semantics: str) -> "CellGraph":
        return CellGraph(self.level, self.lattice_nodes, self.triangles, self.addresses, self.convention, semantics)

    def active_triangles(self) -> np.ndarray:
        if self.semantics == "multiset":
            return self.triangles
        keys = np.sort(self.triangles, axis=1)
        _, first = np.unique(keys, axis=0, return_index=True)
        return self.triangles[np.sort(first)]

    def pairs(self) -> np.ndarray:
        """Node index pairs ``(k, 2)`` entering the energy sum, with repetition."""
        if self.convention == "edges-only":
            return self.triangles[:, [0, 1]]
        tri = self.active_triangles()
        un = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]], axis=0)
        if self.convention == "all-pairs-ordered":
            return np.concatenate([un, un[:, ::-1]], axis=0)
        return un

    def node_index(self) -> dict:
        return {tuple(int(c) for c in v): k for k, v in enumerate(self.lattice_nodes)}

    def curve_vertex_indices(self) -> np.ndarray:
        """Indices of the K_n vertices, in traversal order."""
        return self.triangles[:, 0].copy()

    def apex_indices(self) -> np.ndarray:
        onk = np.zeros(self.n_nodes, dtype=bool)
        onk[self.triangles[:, 0]] = True
        return np.flatnonzero(~onk)

    def to_json(self) -> dict:
        return {
            "level": self.level,
            "convention": self.convention,
            "semantics": self.semantics,
            "nodes": self.lattice_nodes.tolist(),
            "node_coords": self.coords.tolist(),
            "triangles": self.triangles.tolist(),
            "addresses": [a.label() for a in self.addresses],
        }


@lru_cache(maxsize=16)
def _graph_arrays(n: int):
    cells = _curve_cells(n)
    index: dict = {}
    nodes = []
    tris = np.empty((len(cells), 3), dtype=np.int64)
    for k, cell in enumerate(cells):
        for m, v in enumerate(cell.corners):
            idx = index.get(v)
            if idx is None:
                idx = len(nodes)
                index[v] = idx
                nodes.append(v)
            tris[k, m] = idx
    arr = np.array(nodes, dtype=np.int64)
    arr.setflags(write=False)
    tris.setflags(write=False)
    return arr, tris, tuple(c.address for c in cells)


def cell_graph(n: int, convention: str = "all-pairs-unordered", semantics: str = "multiset",
               max_level: int = MAX_LEVEL) -> CellGraph:
    _check_level(n, max_level)
    nodes, tris, addrs = _graph_arrays(n)
    return CellGraph(n, nodes, tris, addrs, convention, semantics)


@dataclass(frozen=True)
class TraceValues:
    graph: CellGraph
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.graph.n_nodes,):
            raise ValueError(f"expected {self.graph.n_nodes} values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("trace values must be finite")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, graph: CellGraph, u: Callable) -> "TraceValues":
        xy = graph.coords
        return cls(graph, np.asarray(u(xy[:, 0], xy[:, 1]), dtype=float) * np.ones(len(xy)))

    def on_curve(self) -> np.ndarray:
        return self.values[self.graph.curve_vertex_indices()]

    def value_map(self) -> dict:
        return {tuple(int(c) for c in v): float(x) for v, x in zip(self.graph.lattice_nodes, self.values)}


def energy_scale(n: int, p: float) -> float:
    return 4.0 ** ((p - 1.0) * n) / p


def discrete_energy(trace: TraceValues, p: float, convention: str | None = None) -> float:
    """Renormalized cell energy ``4**((p-1)n)/p * sum |u(x) - u(y)|**p``."""
    g = trace.graph
    if convention is not None and convention != g.convention:
        raise ConventionMismatch(f"trace graph uses {g.convention!r}, asked for {convention!r}")
    pr = g.pairs()
    d = np.abs(trace.values[pr[:, 0]] - trace.values[pr[:, 1]])
    return energy_scale(g.level, p) * float(np.sum(d**p))


def energy_gradient(graph: CellGraph, values: np.ndarray, p: float, eta: float = 0.0):
    """Gradient and Hessian (sparse COO triplets) of the cell energy in the node values.

    With ``eta > 0`` the pair terms use ``(d**2 + eta**2)**(p/2)``.
    """
    pr = graph.pairs()
    i, j = pr[:, 0], pr[:, 1]
    d = values[i] - values[j]
    s = energy_scale(graph.level, p)
    r2 = d * d + eta * eta
    g1 = s * p * r2 ** ((p - 2.0) / 2.0) * d  # derivative wrt values[i]
    h = s * p * (r2 ** ((p - 2.0) / 2.0) + (p - 2.0) * r2 ** ((p - 4.0) / 2.0) * d * d) if p != 2 else np.full(len(d), 2.0 * s)
    grad = np.bincount(i, weights=g1, minlength=graph.n_nodes) - np.bincount(j, weights=g1, minlength=graph.n_nodes)
    rows = np.concatenate([i, j, i, j])
    cols = np.concatenate([i, j, j, i])
    vals = np.concatenate([h, h, -h, -h])
    return grad, (rows, cols, vals)


def regularized_energy(graph: CellGraph, values: np.ndarray, p: float, eta: float = 0.0) -> float:
    pr = graph.pairs()
    d = values[pr[:, 0]] - values[pr[:, 1]]
    if eta == 0.0:
        return energy_scale(graph.level, p) * float(np.sum(np.abs(d) ** p))
    return energy_scale(graph.level, p) * float(np.sum((d * d + eta * eta) ** (p / 2.0)))


# ---------------------------------------------------------------------------
# decimation


def _minimize_block(pairs: np.ndarray, values: np.ndarray, free: np.ndarray, p: float, tol: float, max_iter: int,
                    scale: float = 1.0):
    """Minimize sum |v_i - v_j|**p over ``free`` node values (dense Newton, in place)."""
    nf = len(free)
    loc = {int(k): m for m, k in enumerate(free)}
    fi = np.array([loc.get(int(k), -1) for k in pairs[:, 0]])
    fj = np.array([loc.get(int(k), -1) for k in pairs[:, 1]])

    def parts(x):
        v = values.copy()
        v[free] = x
        d = v[pairs[:, 0]] - v[pairs[:, 1]]
        return d

    def energy(x):
        return float(np.sum(np.abs(parts(x)) ** p))

    def grad_hess(x, shift):
        d = parts(x)
        ad = np.abs(d)
        g1 = p * ad ** (p - 2.0) * d
        h = p * (p - 1.0) * ad ** (p - 2.0)
        grad = np.zeros(nf)
        hess = np.zeros((nf, nf))
        for k in range(len(d)):
            a, b = fi[k], fj[k]
            if a >= 0:
                grad[a] += g1[k]
                hess[a, a] += h[k]
            if b >= 0:
                grad[b] -= g1[k]
                hess[b, b] += h[k]
            if a >= 0 and b >= 0:
                hess[a, b] -= h[k]
                hess[b, a] -= h[k]
        hess[np.diag_indices(nf)] += shift
        return grad, hess

    # p = 2 start: linear solve
    grad0, hess0 = _quadratic_system(pairs, values, free, fi, fj)
    x = np.linalg.solve(hess0, -grad0)
    if p == 2:
        return x, 0
    f = energy(x)
    for it in range(1, max_iter + 1):
        g, hmat = grad_hess(x, 0.0)
        gnorm = float(np.max(np.abs(g)))
        if gnorm <= tol * scale ** (p - 1.0):
            return x, it
        shift = 1e-14 * max(float(np.max(np.diag(hmat))), 1e-300)
        try:
            step = np.linalg.solve(hmat + shift * np.eye(nf), -g)
        except np.linalg.LinAlgError:
            step = -g
        t = 1.0
        slope = float(g @ step)
        if slope >= 0:
            step = -g
            slope = float(g @ step)
        while True:
            xn = x + t * step
            fn = energy(xn)
            if fn <= f + 1e-4 * t * slope or t < 1e-12:
                break
            t *= 0.5
        if fn >= f:
            return x, it
        x, f = xn, fn
    raise DecimationError(f"decimation block did not converge in {max_iter} iterations (|grad|={gnorm:.3e})")


def _quadratic_system(pairs, values, free, fi, fj):
    nf = len(free)
    hess = np.zeros((nf, nf))
    rhs = np.zeros(nf)
    for k in range(len(pairs)):
        a, b = fi[k], fj[k]
        if a >= 0 and b >= 0:
            hess[a, a] += 2
            hess[b, b] += 2
            hess[a, b] -= 2
            hess[b, a] -= 2
        elif a >= 0:
            hess[a, a] += 2
            rhs[a] -= 2 * values[pairs[k, 1]]
        elif b >= 0:
            hess[b, b] += 2
            rhs[b] -= 2 * values[pairs[k, 0]]
    return rhs, hess


def decimation_step(trace: TraceValues, p: float, tol: float = 1e-13, max_iter: int = 200) -> TraceValues:
    """Extend the K_n values of ``trace`` to the level-(n+1) graph by energy minimization.

    Only the values on K_n vertices are used.  Every other level-(n+1) node is
    free; the level-(n+1) energy is minimized jointly over each connected group
    of free nodes.
    """
    g = trace.graph
    fine = cell_graph(g.level + 1, g.convention, g.semantics, max_level=max(MAX_LEVEL, g.level + 1))
    return _extend_to(fine, g, trace.on_curve(), p, tol, max_iter)


def _extend_to(fine: CellGraph, coarse: CellGraph, curve_values: np.ndarray, p: float, tol: float, max_iter: int):
    idx = fine.node_index()
    values = np.zeros(fine.n_nodes)
    fixed = np.zeros(fine.n_nodes, dtype=bool)
    for v, val in zip(coarse.lattice_nodes[coarse.curve_vertex_indices()], curve_values):
        k = idx[(3 * int(v[0]), 3 * int(v[1]))]
        values[k] = val
        fixed[k] = True
    scale = max(float(np.ptp(curve_values)), 1e-300) if len(curve_values) else 1.0
    pr = fine.pairs()
    if fine.convention == "edges-only":
        # segment vertices first; the apexes are invisible to this energy and
        # receive the all-pairs extension of the resulting curve values
        _minimize_free(pr, values, fixed, p, tol, max_iter, scale)
        fixed = fixed.copy()
        fixed[fine.curve_vertex_indices()] = True
        pr = fine.with_convention("all-pairs-unordered").pairs()
    _minimize_free(pr, values, fixed, p, tol, max_iter, scale)
    return TraceValues(fine, values)


def fill_apexes(graph: CellGraph, curve_values: np.ndarray, p: float, tol: float = 1e-13,
                max_iter: int = 200) -> TraceValues:
    """Trace with the given K_n values and apexes minimizing the all-pairs energy."""
    values = np.zeros(graph.n_nodes)
    fixed = np.zeros(graph.n_nodes, dtype=bool)
    cv = graph.curve_vertex_indices()
    values[cv] = curve_values
    fixed[cv] = True
    scale = max(float(np.ptp(curve_values)), 1e-300) if len(curve_values) else 1.0
    _minimize_free(graph.with_convention("all-pairs-unordered").pairs(), values, fixed, p, tol, max_iter, scale)
    return TraceValues(graph, values)


def _minimize_free(pr, values, fixed, p, tol, max_iter, scale):
    """Minimize the pair energy over nodes not ``fixed`` and seen by ``pr``, group by group."""
    m = len(values)
    seen = np.zeros(m, dtype=bool)
    seen[pr.ravel()] = True
    free = np.flatnonzero(~fixed & seen)
    both = (~fixed[pr[:, 0]]) & (~fixed[pr[:, 1]])
    adj = coo_matrix((np.ones(int(both.sum())), (pr[both, 0], pr[both, 1])), shape=(m, m))
    _, labels = connected_components(adj, directed=False)
    groups: dict = {}
    for k in free:
        groups.setdefault(int(labels[k]), []).append(int(k))
    touching = fixed[pr[:, 0]] & fixed[pr[:, 1]]
    pr_free = pr[~touching]
    owner = np.where(~fixed[pr_free[:, 0]], labels[pr_free[:, 0]], labels[pr_free[:, 1]])
    order = np.argsort(owner, kind="stable")
    pr_sorted, owner_sorted = pr_free[order], owner[order]
    keys = sorted(groups)
    bounds = np.searchsorted(owner_sorted, keys + [np.iinfo(np.int64).max])
    for gi, lab in enumerate(keys):
        block = pr_sorted[bounds[gi]:bounds[gi + 1]]
        fr = np.array(groups[lab], dtype=np.int64)
        nb = np.setdiff1d(np.unique(block), fr)
        if len(nb) and np.ptp(values[nb]) == 0.0:
            values[fr] = values[nb[0]]
            continue
        x, _ = _minimize_block(block, values, fr, p, tol, max_iter, scale)
        values[fr] = x


def segment_extension(a: float, b: float, p: float, tol: float = 1e-14, max_iter: int = 200) -> dict:
    """Minimize one segment's four-subcell energy with end values ``a`` and ``b``.

    Returns the values at the new nodes ``a1`` (first third), ``tip`` (bump),
    ``a2`` (second third), ``apex1`` and ``apex4`` (off-segment apexes of the
    first and last subcell).  The unit segment is [0, 3] on the lattice.
    """
    # nodes: 0 P, 1 Q, 2 a1, 3 tip, 4 a2, 5 apex1, 6 apex4
    tris = np.array([[0, 2, 5], [2, 3, 4], [3, 4, 2], [4, 1, 6]])
    pr = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    values = np.zeros(7)
    values[0], values[1] = a, b
    free = np.arange(2, 7)
    if a == b:
        values[free] = a
    else:
        x, _ = _minimize_block(pr, values, free, p, tol, max_iter, abs(b - a))
        values[free] = x
    return dict(zip(("a1", "tip", "a2", "apex1", "apex4"), values[2:].tolist()))


def decimate_extend(boundary, target_level: int, p: float, convention: str = "all-pairs-unordered",
                    semantics: str = "multiset", tol: float = 1e-13, keep_levels: bool = False):
    """Extend values on K_n (a TraceValues, or an array of K_n vertex values) level by level.

    Returns the level-``target_level`` TraceValues, or the list of all levels
    from ``n`` to ``target_level`` when ``keep_levels`` is set.
    """
    if isinstance(boundary, TraceValues):
        trace = boundary
        if trace.graph.convention != convention or trace.graph.semantics != semantics:
            trace = TraceValues(cell_graph(trace.graph.level, convention, semantics), trace.values)
    else:
        vals, level = boundary
        vals = np.asarray(vals, dtype=float)
        g = cell_graph(level, convention, semantics)
        full = np.zeros(g.n_nodes)
        full[g.curve_vertex_indices()] = vals
        # level values off K_n are not used by the extension; fill them for a finite trace
        full[g.apex_indices()] = float(np.mean(vals)) if len(vals) else 0.0
        trace = TraceValues(g, full)
    if target_level <= trace.graph.level:
        raise ValueError("target level must exceed the trace level")
    levels = [trace]
    while levels[-1].graph.level < target_level:
        levels.append(decimation_step(levels[-1], p, tol=tol))
    return levels if keep_levels else levels[-1]


def energy_sequence(u: Callable, p: float, n_max: int, convention: str = "all-pairs-unordered",
                    semantics: str = "multiset") -> list[dict]:
    rows = []
    prev = None
    for n in range(n_max + 1):
        tr = TraceValues.from_function(cell_graph(n, convention, semantics), u)
        e = discrete_energy(tr, p)
        rows.append({"n": n, "energy": e, "difference": None if prev is None else e - prev,
                     "ratio": None if not prev else e / prev})
        prev = e
    return rows


def mu_cell_measure(address: CellAddress) -> float:
    return 4.0 ** (-address.level)


def cell_barycenters(n: int) -> np.ndarray:
    """Barycenter of the boundary measure restricted to each K_n cell, shape (3*4**n, 2)."""
    g = cell_graph(n)
    xy = g.coords
    p = xy[g.triangles[:, 0]]
    q = xy[g.triangles[:, 1]]
    d = q - p
    normal = np.stack([d[:, 1], -d[:, 0]], axis=1)
    return p + 0.5 * d + (math.sqrt(3.0) / 18.0) * normal


def besov_seminorm_estimate(u: Callable, p: float, n: int, cap: int = 5, block: int = 2048) -> float:
    """Midpoint-rule double sum of ``|u(P)-u(P')|**p / |P-P'|**(2 d_f + p - 1)`` over cell pairs."""
    if n > cap:
        raise BesovLevelError(f"level {n} exceeds the configured cap {cap}")
    pts = cell_barycenters(n)
    vals = np.asarray(u(pts[:, 0], pts[:, 1]), dtype=float) * np.ones(len(pts))
    w = 4.0 ** (-n)
    expo = 2.0 * D_F + p - 1.0
    total = 0.0
    m = len(pts)
    for s in range(0, m, block):
        dx = pts[s:s + block, None, :] - pts[None, :, :]
        r = np.sqrt(np.sum(dx * dx, axis=-1))
        dv = np.abs(vals[s:s + block, None] - vals[None, :])
        mask = (r > 0) & (r < 1.0)
        total += float(np.sum(np.where(mask, dv**p / np.where(mask, r, 1.0) ** expo, 0.0)))
    return total * w * w


def triangle_key_of_cell(graph: CellGraph, k: int):
    return triangle_of_corners(tuple(tuple(int(c) for c in graph.lattice_nodes[i]) for i in graph.triangles[k]))
