"""Region-tagged triangulations of the fibered domain and lattice meshes of the outer triangle."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import triangle as tr
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .geometry import (
    C1,
    DomainGeometry,
    GeometryError,
    _curve_cells,
    inner_depth,
    interior_triangles,
    lattice_to_float,
    omega_star_triangles,
    triangle_corners,
)

log = logging.getLogger(__name__)

TAG_BULK, TAG_FIBER, TAG_ANNULUS, TAG_EXTERIOR = 0, 1, 2, 3
TAG_NAMES = {TAG_BULK: "bulk", TAG_FIBER: "fiber", TAG_ANNULUS: "annulus", TAG_EXTERIOR: "exterior"}
PIECE_NAMES = ("T1", "R", "T2")
NO_LATTICE = np.iinfo(np.int64).min


class MeshQualityFailure(RuntimeError):
    pass


class StitchingFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class MeshParams:
    """Fibered-mesh controls.

    ``bulk_refine`` subdivides each level-n lattice edge, so the bulk size is
    ``h = 3**-n / bulk_refine``; the default 3 gives ``h = 3**-(n+1)``.
    """

    bulk_refine: int = 3
    fiber_layers: int = 2
    grading: float = 0.5
    depth: int = 4
    mid_segments: int | None = None
    min_angle: float = 0.005  # degrees; fiber bands are thin by design
    cdt_angle: float = 20.0

    def __post_init__(self):
        if self.bulk_refine < 1 or self.fiber_layers < 1 or self.depth < 0:
            raise ValueError("mesh counts must be positive")
        if not 0.0 < self.grading < 1.0:
            raise ValueError("grading ratio must lie in (0, 1)")

    def as_dict(self) -> dict:
        return {
            "bulk_refine": self.bulk_refine,
            "fiber_layers": self.fiber_layers,
            "grading": self.grading,
            "depth": self.depth,
            "mid_segments": self.mid_segments,
            "min_angle": self.min_angle,
            "cdt_angle": self.cdt_angle,
        }


@dataclass(eq=False)
class Mesh:
    points: np.ndarray  # (nv, 2)
    triangles: np.ndarray  # (nt, 3), counter-clockwise
    region: np.ndarray  # (nt,) TAG_*
    level: int
    kind: str  # "fibered", "omega_star" or "prefractal"
    host: np.ndarray  # (nt, 3) level-n lattice key containing the element
    lattice_node: np.ndarray  # (nv, 2) level-n lattice coordinates or NO_LATTICE
    curve_vertex: np.ndarray  # (nv,) bool
    markers: dict = field(default_factory=dict)  # name -> (k, 2) vertex pairs
    collar: np.ndarray | None = None  # (nt,) collar index or -1
    piece: np.ndarray | None = None  # (nt,) 0, 1, 2 or -1
    local: np.ndarray | None = None  # (nt, 3, 2) collar-local (x, t) of element vertices
    collar_frames: np.ndarray | None = None  # (nc, 3, 2): origin, tangent, normal
    collar_multiplicity: np.ndarray | None = None
    eps: float | None = None
    params: dict = field(default_factory=dict)
    geometry: DomainGeometry | None = field(default=None, repr=False)

    @property
    def n_vertices(self) -> int:
        return len(self.points)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def gradients(self):
        from .kernels import element_gradients

        return element_gradients(self.points, self.triangles)

    @cached_property
    def areas(self) -> np.ndarray:
        """Element areas; collar elements use their local coordinates, which avoids plane round-off."""
        out = self.gradients[1].copy()
        if self.local is not None:
            m = self.collar >= 0
            lo = self.local[m]
            d1 = lo[:, 1] - lo[:, 0]
            d2 = lo[:, 2] - lo[:, 0]
            # the collar frame reverses orientation
            out[m] = -0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]) * 9.0**-self.level
        return out

    @cached_property
    def edges(self):
        """Unique edges ``(m, 2)`` (sorted pairs), and for each the incident elements (``-1`` if none)."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        owner = np.tile(np.arange(len(t)), 3)
        uniq, inv, counts = np.unique(e, axis=0, return_inverse=True, return_counts=True)
        inv = inv.ravel()
        order = np.argsort(inv, kind="stable")
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        inc = np.full((len(uniq), 2), -1, dtype=np.int64)
        inc[:, 0] = owner[order[starts]]
        two = counts >= 2
        inc[two, 1] = owner[order[starts[two] + 1]]
        return uniq, inc, counts

    def region_area(self, tag: int) -> float:
        return float(np.sum(self.areas[self.region == tag]))

    def element_multiplicity(self) -> np.ndarray:
        out = np.zeros(self.n_triangles, dtype=np.int64)
        if self.collar is not None and self.collar_multiplicity is not None:
            m = self.collar >= 0
            out[m] = self.collar_multiplicity[self.collar[m]]
        return out

    def curve_vertex_indices(self) -> np.ndarray:
        return np.flatnonzero(self.curve_vertex)

    def vertex_of_lattice(self) -> dict:
        """Level-n lattice point -> vertex index."""
        idx = np.flatnonzero(self.lattice_node[:, 0] != NO_LATTICE)
        return {(int(self.lattice_node[k, 0]), int(self.lattice_node[k, 1])): int(k) for k in idx}

    def submesh(self, keep: np.ndarray, kind: str | None = None) -> "Mesh":
        keep = np.asarray(keep, dtype=bool)
        used = np.unique(self.triangles[keep])
        remap = np.full(self.n_vertices, -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        tris = remap[self.triangles[keep]]
        markers = {}
        for name, ed in self.markers.items():
            r = remap[ed]
            markers[name] = r[np.all(r >= 0, axis=1)]

        def sel(a):
            return None if a is None else a[keep]

        sub = Mesh(
            self.points[used], tris, self.region[keep], self.level, kind or self.kind, self.host[keep],
            self.lattice_node[used], self.curve_vertex[used], markers, sel(self.collar), sel(self.piece),
            sel(self.local), self.collar_frames, self.collar_multiplicity, self.eps, dict(self.params), self.geometry,
        )
        sub.markers["outer"] = _boundary_edges(sub)
        return sub


# ---------------------------------------------------------------------------
# helpers


def _boundary_edges(mesh: Mesh) -> np.ndarray:
    uniq, _, counts = mesh.edges
    return uniq[counts == 1]


def _orient(points: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Boolean mask of clockwise triangles."""
    p = points[tris]
    det = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
    return det < 0


def _merge_points(points: np.ndarray, tol: float):
    """Collapse points closer than ``tol``; returns (unique points, index map) in first-seen order."""
    tree = cKDTree(points)
    pairs = tree.query_pairs(tol, output_type="ndarray")
    n = len(points)
    if len(pairs):
        g = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
        _, comp = connected_components(g, directed=False)
    else:
        comp = np.arange(n)
    # first occurrence of each component defines its order and coordinates
    _, first = np.unique(comp, return_index=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty(len(first), dtype=np.int64)
    rank[order] = np.arange(len(first))
    comp_ids = np.unique(comp)
    lookup = np.empty(comp.max() + 1, dtype=np.int64)
    lookup[comp_ids] = rank
    index = lookup[comp]
    uniq = points[np.sort(first)]
    return uniq, index


def _lattice_coords(points: np.ndarray, level: int):
    n3 = float(3**level)
    rj = points[:, 1] * (2.0 / math.sqrt(3.0)) * n3
    ri = points[:, 0] * n3 - 0.5 * rj
    return ri, rj


def _locate_keys(points: np.ndarray, level: int) -> np.ndarray:
    ri, rj = _lattice_coords(points, level)
    i = np.floor(ri)
    j = np.floor(rj)
    up = (ri - i + rj - j) < 1.0
    return np.stack([i, j, up], axis=1).astype(np.int64)


def _lattice_nodes(points: np.ndarray, level: int, tol: float = 1e-9) -> np.ndarray:
    ri, rj = _lattice_coords(points, level)
    ii, jj = np.rint(ri), np.rint(rj)
    on = (np.abs(ri - ii) < tol) & (np.abs(rj - jj) < tol)
    out = np.full((len(points), 2), NO_LATTICE, dtype=np.int64)
    out[on, 0] = ii[on]
    out[on, 1] = jj[on]
    return out


def _edges_on_lattice_set(points: np.ndarray, edges: np.ndarray, level: int, lattice_edges: frozenset,
                          tol: float = 1e-9) -> np.ndarray:
    """Mask of mesh edges lying along one of the given level-n lattice edges."""
    if len(edges) == 0:
        return np.zeros(0, dtype=bool)
    ri, rj = _lattice_coords(points, level)
    a, b = edges[:, 0], edges[:, 1]
    out = np.zeros(len(edges), dtype=bool)
    mi, mj = 0.5 * (ri[a] + ri[b]), 0.5 * (rj[a] + rj[b])
    lines = (
        (rj, lambda: (np.floor(mi), np.rint(mj), np.floor(mi) + 1, np.rint(mj))),
        (ri, lambda: (np.rint(mi), np.floor(mj), np.rint(mi), np.floor(mj) + 1)),
        (ri + rj, lambda: (np.floor(mi), np.rint(mi + mj) - np.floor(mi), np.floor(mi) + 1, np.rint(mi + mj) - np.floor(mi) - 1)),
    )
    for coord, ends in lines:
        on = (np.abs(coord[a] - np.rint(coord[a])) < tol) & (np.abs(coord[b] - np.rint(coord[b])) < tol)
        on &= np.rint(coord[a]) == np.rint(coord[b])
        if not np.any(on):
            continue
        i0, j0, i1, j1 = ends()
        for k in np.flatnonzero(on):
            key = frozenset(((int(i0[k]), int(j0[k])), (int(i1[k]), int(j1[k]))))
            if key in lattice_edges:
                out[k] = True
    return out


def _min_angles(points: np.ndarray, tris: np.ndarray) -> np.ndarray:
    p = points[tris]
    out = np.full(len(tris), np.pi)
    for k in range(3):
        u = p[:, (k + 1) % 3] - p[:, k]
        v = p[:, (k + 2) % 3] - p[:, k]
        cosang = np.einsum("ij,ij->i", u, v) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
        out = np.minimum(out, np.arccos(np.clip(cosang, -1.0, 1.0)))
    return np.degrees(out)


# ---------------------------------------------------------------------------
# reference collar


@dataclass
class ReferenceCollar:
    nodes: np.ndarray  # (m, 2) local (x, t)
    triangles: np.ndarray
    piece: np.ndarray
    band: np.ndarray  # TAG_FIBER or TAG_ANNULUS
    base: np.ndarray  # node indices along t = 0, increasing x
    outer: np.ndarray  # node indices along the outer boundary, increasing x
    columns: np.ndarray  # abscissas of the base nodes


def reference_columns(eps: float, params: MeshParams) -> np.ndarray:
    """Abscissas of the collar columns: graded toward both corners, symmetric under ``x -> 1 - x``."""
    a = eps / C1
    left = [a * params.grading**k for k in range(params.depth, 0, -1)] + [a]
    m = params.mid_segments or params.bulk_refine
    mid = [a + (1.0 - 2.0 * a) * k / m for k in range(1, (m + 1) // 2)]
    half = [0.0] + left + mid
    if m % 2 == 0:
        centre = [0.5]
    else:
        centre = []
    right = [1.0 - x for x in reversed(half)]
    return np.array(half + centre + right)


def reference_collar(eps: float, params: MeshParams) -> ReferenceCollar:
    cols = reference_columns(eps, params)
    a = eps / C1
    mf = params.fiber_layers
    rows = 2 * mf + 1
    nodes = [(0.0, 0.0)]
    index = {}
    nc = len(cols)
    for c in range(1, nc - 1):
        x = cols[c]
        d = float(inner_depth(x, eps))
        for r in range(rows):
            t = d * r / mf if r <= mf else d * (1.0 + (r - mf) / mf)
            index[c, r] = len(nodes)
            nodes.append((x, t))
    last = len(nodes)
    nodes.append((1.0, 0.0))
    for r in range(rows):
        index[0, r] = 0
        index[nc - 1, r] = last

    tris, piece, band = [], [], []

    def piece_of(xm):
        return 0 if xm < a else (2 if xm > 1.0 - a else 1)

    for c in range(nc - 1):
        pc = piece_of(0.5 * (cols[c] + cols[c + 1]))
        for r in range(rows - 1):
            bd = TAG_FIBER if r < mf else TAG_ANNULUS
            p00, p10, p11, p01 = index[c, r], index[c + 1, r], index[c + 1, r + 1], index[c, r + 1]
            # clockwise in (x, t): the collar frame is left-handed in the plane
            if c == 0:
                cand = [(p00, p11, p10)]
            elif c == nc - 2:
                cand = [(p00, p01, p10)]
            else:
                cand = [(p00, p11, p10), (p00, p01, p11)]
            for t in cand:
                tris.append(t)
                piece.append(pc)
                band.append(bd)
    base = np.array([index[c, 0] for c in range(nc)])
    outer = np.array([index[c, rows - 1] for c in range(nc)])
    return ReferenceCollar(np.array(nodes), np.array(tris, dtype=np.int64), np.array(piece, dtype=np.int8),
                           np.array(band, dtype=np.int8), base, outer, cols)


# ---------------------------------------------------------------------------
# fibered domain


def _subdivide_keys(keys: np.ndarray, r: int):
    """Fine-lattice triangles (resolution ``r`` per coarse edge) inside the given coarse keys.

    Returns fine keys (k, 3) and the coarse row of each.
    """
    out, owner = [], []
    for a in range(r):
        for b in range(r):
            if a + b <= r - 1:
                out.append((a, b, 1, 1))
            if a + b <= r - 2:
                out.append((a, b, 0, 1))
            if a + b >= r - 1:
                out.append((a, b, 0, 0))
            if a + b >= r:
                out.append((a, b, 1, 0))
    pat = np.array(out, dtype=np.int64)
    fine = []
    for up in (1, 0):
        sel = keys[:, 2] == up
        ks = keys[sel]
        rows = np.flatnonzero(sel)
        pp = pat[pat[:, 3] == up]
        f = np.empty((len(ks), len(pp), 3), dtype=np.int64)
        f[:, :, 0] = r * ks[:, None, 0] + pp[None, :, 0]
        f[:, :, 1] = r * ks[:, None, 1] + pp[None, :, 1]
        f[:, :, 2] = pp[None, :, 2]
        fine.append(f.reshape(-1, 3))
        owner.append(np.repeat(rows, len(pp)))
    return np.concatenate(fine), np.concatenate(owner)


def _key_corner_coords(keys: np.ndarray) -> np.ndarray:
    """Integer corners (k, 3, 2) of lattice keys, counter-clockwise."""
    i, j, up = keys[:, 0], keys[:, 1], keys[:, 2].astype(bool)
    c = np.empty((len(keys), 3, 2), dtype=np.int64)
    c[:, 0, 0] = np.where(up, i, i + 1)
    c[:, 0, 1] = j
    c[:, 1, 0] = i + 1
    c[:, 1, 1] = np.where(up, j, j + 1)
    c[:, 2, 0] = i
    c[:, 2, 1] = j + 1
    return c


def _int_to_float(ij: np.ndarray, res: int) -> np.ndarray:
    ij = np.asarray(ij, dtype=float)
    out = np.empty(ij.shape)
    out[..., 0] = (ij[..., 0] + 0.5 * ij[..., 1]) / res
    out[..., 1] = (math.sqrt(3.0) / 2.0) * ij[..., 1] / res
    return out


def _collar_plane(col, ref: ReferenceCollar) -> np.ndarray:
    o, ex, ey = col.frame()
    return o + ref.nodes[:, :1] * ex + ref.nodes[:, 1:2] * ey


def _remainder_patch(key, hosted, base_edges, ref, collar_xy, level, r, max_area, cdt_angle):
    """CDT of a lattice triangle minus the outer trapezoids of its hosted collars."""
    corners = triangle_corners(key)
    res = r * 3**level
    by_edge = {frozenset(c.edge): c for c in hosted}
    ring = []
    for k in range(3):
        c0, c1 = corners[k], corners[(k + 1) % 3]
        e = frozenset((c0, c1))
        if e in by_edge:
            col = by_edge[e]
            pts = collar_xy[col.index][ref.outer]
            if col.edge[0] != c0:
                pts = pts[::-1]
            ring.extend(pts[:-1])
        elif e in base_edges:
            p0 = np.array(lattice_to_float(c0, level))
            p1 = np.array(lattice_to_float(c1, level))
            for x in ref.columns[:-1]:
                ring.append(p0 + x * (p1 - p0))
        else:
            d = (c1[0] - c0[0], c1[1] - c0[1])
            for s in range(r):
                ring.append(_int_to_float(np.array([r * c0[0] + s * d[0], r * c0[1] + s * d[1]]), res))
    ring = np.array(ring)
    m = len(ring)
    seg = np.stack([np.arange(m), (np.arange(m) + 1) % m], axis=1)
    out = tr.triangulate({"vertices": ring, "segments": seg}, f"pYq{cdt_angle}a{max_area:.17g}Q")
    verts = out["vertices"]
    if not np.allclose(verts[:m], ring):
        raise StitchingFailure(f"CDT changed the boundary of lattice triangle {key}")
    return verts, out["triangles"].astype(np.int64)


def mesh_fibered_domain(geometry: DomainGeometry, params: MeshParams | None = None, threads: int = 1) -> Mesh:
    """Conforming mesh of the pre-fractal domain plus all collars, tagged bulk / fiber / annulus."""
    params = params or MeshParams()
    geom = geometry
    n = geom.level
    eps = geom.eps_float
    L = geom.edge_length
    r = params.bulk_refine
    ref = reference_collar(eps, params)

    collar_xy = [_collar_plane(c, ref) for c in geom.collars]
    base_edges = {frozenset(c.edge) for c in geom.collars}
    by_host = geom.collars_by_host

    def is_special(key):
        if key in by_host:
            return True
        cs = triangle_corners(key)
        return any(frozenset((cs[k], cs[(k + 1) % 3])) in base_edges for k in range(3))

    interior = sorted(geom.interior)
    plain = np.array([k for k in interior if not is_special(k)], dtype=np.int64).reshape(-1, 3)
    special = [k for k in interior if is_special(k)]

    blocks_pts, blocks_tri, blocks_region, blocks_host = [], [], [], []
    blocks_collar, blocks_piece, blocks_local = [], [], []
    offset = 0

    def add(pts, tris, region, host, collar=None, piece=None, local=None):
        nonlocal offset
        nt = len(tris)
        blocks_pts.append(pts)
        blocks_tri.append(tris + offset)
        blocks_region.append(np.full(nt, region, dtype=np.int8) if np.isscalar(region) else region)
        blocks_host.append(np.broadcast_to(np.asarray(host, dtype=np.int64), (nt, 3)))
        blocks_collar.append(np.full(nt, -1, dtype=np.int64) if collar is None else np.full(nt, collar, dtype=np.int64))
        blocks_piece.append(np.full(nt, -1, dtype=np.int8) if piece is None else piece)
        blocks_local.append(np.full((nt, 3, 2), np.nan) if local is None else local)
        offset += len(pts)

    # plain interior triangles: lattice subdivision
    if len(plain):
        fine, owner = _subdivide_keys(plain, r)
        corners = _key_corner_coords(fine)
        pts = _int_to_float(corners.reshape(-1, 2), r * 3**n)
        tris = np.arange(len(pts), dtype=np.int64).reshape(-1, 3)
        add(pts, tris, TAG_BULK, plain[owner])

    # remainders of special interior triangles
    max_area = math.sqrt(3.0) / 4.0 * (L / r) ** 2
    jobs = [(k, by_host.get(k, [])) for k in special]

    def run(job):
        key, hosted = job
        return _remainder_patch(key, hosted, base_edges, ref, collar_xy, n, r, max_area, params.cdt_angle)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    for (key, _), (verts, tris) in zip(jobs, results):
        add(verts, tris, TAG_BULK, key)

    # collars
    loc_ref = ref.nodes[ref.triangles]
    for col in geom.collars:
        add(collar_xy[col.index], ref.triangles, ref.band.copy(), col.host, col.index, ref.piece.copy(), loc_ref)

    points = np.concatenate(blocks_pts)
    tris = np.concatenate(blocks_tri)
    uniq, index = _merge_points(points, 1e-9 * L)
    tris = index[tris]
    region = np.concatenate(blocks_region)
    host = np.concatenate(blocks_host)
    collar = np.concatenate(blocks_collar)
    piece = np.concatenate(blocks_piece)
    local = np.concatenate(blocks_local)

    flip = _orient(uniq, tris)
    tris[flip] = tris[flip][:, [0, 2, 1]]
    local[flip] = local[flip][:, [0, 2, 1]]

    lat = _lattice_nodes(uniq, n)
    curve = {tuple(v) for v in geom.curve.lattice_vertices}
    curve_vertex = np.array([(int(a), int(b)) in curve for a, b in lat])

    frames = np.array([np.stack(c.frame()) for c in geom.collars]).reshape(-1, 3, 2)
    mesh = Mesh(
        uniq, tris, region, n, "fibered", host, lat, curve_vertex, {}, collar, piece, local, frames,
        geom.multiplicities.astype(np.int64), eps, params.as_dict(), geom,
    )
    _attach_markers(mesh, geom.curve_edges)
    _check_built(mesh, params)
    return mesh


def _attach_markers(mesh: Mesh, curve_edges: frozenset):
    uniq, inc, counts = mesh.edges
    kn = _edges_on_lattice_set(mesh.points, uniq, mesh.level, curve_edges)
    mesh.markers["K_n"] = uniq[kn]
    mesh.markers["outer"] = uniq[counts == 1]
    if mesh.kind == "fibered":
        fib = mesh.region == TAG_FIBER
        a = fib[inc[:, 0]]
        b = np.where(inc[:, 1] >= 0, fib[np.maximum(inc[:, 1], 0)], False)
        mesh.markers["gamma"] = uniq[(a != b) & ~kn]


def _check_built(mesh: Mesh, params: MeshParams):
    if np.any(_orient(mesh.points, mesh.triangles)):
        raise StitchingFailure("clockwise elements after assembly")
    _, _, counts = mesh.edges
    if np.any(counts > 2):
        raise StitchingFailure(f"{int(np.sum(counts > 2))} edges shared by more than two elements")
    hang = _hanging_edges(mesh)
    if len(hang):
        raise StitchingFailure(f"{len(hang)} boundary edges overlap collinearly (hanging nodes)")
    ang = float(_min_angles(mesh.points, mesh.triangles).min())
    if ang < params.min_angle:
        raise MeshQualityFailure(f"minimum angle {ang:.3g} deg below floor {params.min_angle}")


def _hanging_edges(mesh: Mesh) -> list:
    """Pairs of boundary edges that overlap along a common line (a hanging node signature)."""
    b = _boundary_edges(mesh)
    if len(b) == 0:
        return []
    p, q = mesh.points[b[:, 0]], mesh.points[b[:, 1]]
    mid = 0.5 * (p + q)
    half = 0.5 * np.linalg.norm(q - p, axis=1)
    tree = cKDTree(mid)
    out = []
    for k in range(len(b)):
        for m in tree.query_ball_point(mid[k], half[k] * (1.0 - 1e-9)):
            if m == k:
                continue
            d = q[k] - p[k]
            nrm = np.array([-d[1], d[0]]) / np.linalg.norm(d)
            if abs((p[m] - p[k]) @ nrm) < 1e-9 * half[k] and abs((q[m] - p[k]) @ nrm) < 1e-9 * half[k]:
                out.append((k, m))
    return out


# ---------------------------------------------------------------------------
# lattice meshes of the outer triangle


def mesh_omega_star(n: int, refine: int = 0) -> Mesh:
    """Level-``n + refine`` lattice triangulation of the outer triangle.

    Elements inside the pre-fractal domain of level ``n`` are tagged bulk, the
    rest exterior.  Successive levels are nested.
    """
    if n < 0 or refine < 0:
        raise ValueError("levels must be non-negative")
    k = n + refine
    keys = np.array(omega_star_triangles(k), dtype=np.int64)
    corners = _key_corner_coords(keys)
    flat = corners.reshape(-1, 2)
    uniq, inv = np.unique(flat, axis=0, return_inverse=True)
    tris = inv.reshape(-1, 3).astype(np.int64)
    points = _int_to_float(uniq, 3**k)
    centroids = points[tris].mean(axis=1)
    host = _locate_keys(centroids, n)
    inside = interior_triangles(n)
    region = np.array([TAG_BULK if tuple(h) in inside else TAG_EXTERIOR for h in host.tolist()], dtype=np.int8)
    lat = _lattice_nodes(points, n)
    curve = {c.corners[0] for c in _curve_cells(n)}
    curve_vertex = np.array([(int(a), int(b)) in curve for a, b in lat])
    mesh = Mesh(points, tris, region, n, "omega_star", host, lat, curve_vertex, {}, params={"refine": refine})
    cells = _curve_cells(n)
    m = len(cells)
    curve_edges = frozenset(frozenset((cells[i].corners[0], cells[(i + 1) % m].corners[0])) for i in range(m))
    _attach_markers(mesh, curve_edges)
    return mesh


def mesh_prefractal(m: int, refine: int = 0) -> Mesh:
    """Lattice mesh of the level-``m`` pre-fractal domain (bulk part of ``mesh_omega_star``)."""
    full = mesh_omega_star(m, refine)
    sub = full.submesh(full.region == TAG_BULK, kind="prefractal")
    return sub


# ---------------------------------------------------------------------------
# refinement


def refine_uniform(mesh: Mesh) -> Mesh:
    """Split every element into four at its edge midpoints; tags and local coordinates are inherited."""
    uniq, _, _ = mesh.edges
    nv = mesh.n_vertices
    mids = 0.5 * (mesh.points[uniq[:, 0]] + mesh.points[uniq[:, 1]])
    lookup = {(int(a), int(b)): nv + k for k, (a, b) in enumerate(uniq)}

    def mid(a, b):
        return np.array([lookup[(min(x, y), max(x, y))] for x, y in zip(a.tolist(), b.tolist())], dtype=np.int64)

    t = mesh.triangles
    m01, m12, m20 = mid(t[:, 0], t[:, 1]), mid(t[:, 1], t[:, 2]), mid(t[:, 2], t[:, 0])
    children = np.stack([
        np.stack([t[:, 0], m01, m20], axis=1),
        np.stack([m01, t[:, 1], m12], axis=1),
        np.stack([m20, m12, t[:, 2]], axis=1),
        np.stack([m01, m12, m20], axis=1),
    ], axis=1).reshape(-1, 3)

    def rep(a):
        return None if a is None else np.repeat(a, 4, axis=0)

    local = None
    if mesh.local is not None:
        lo = mesh.local
        l01, l12, l20 = 0.5 * (lo[:, 0] + lo[:, 1]), 0.5 * (lo[:, 1] + lo[:, 2]), 0.5 * (lo[:, 2] + lo[:, 0])
        local = np.stack([
            np.stack([lo[:, 0], l01, l20], axis=1),
            np.stack([l01, lo[:, 1], l12], axis=1),
            np.stack([l20, l12, lo[:, 2]], axis=1),
            np.stack([l01, l12, l20], axis=1),
        ], axis=1).reshape(-1, 3, 2)
    markers = {}
    for name, ed in mesh.markers.items():
        if len(ed) == 0:
            markers[name] = ed
            continue
        mm = mid(ed[:, 0], ed[:, 1])
        markers[name] = np.concatenate([np.stack([ed[:, 0], mm], axis=1), np.stack([mm, ed[:, 1]], axis=1)])
    lat = np.concatenate([mesh.lattice_node, np.full((len(uniq), 2), NO_LATTICE, dtype=np.int64)])
    cv = np.concatenate([mesh.curve_vertex, np.zeros(len(uniq), dtype=bool)])
    params = dict(mesh.params)
    params["uniform_refinements"] = params.get("uniform_refinements", 0) + 1
    return Mesh(
        np.concatenate([mesh.points, mids]), children, rep(mesh.region), mesh.level, mesh.kind, rep(mesh.host),
        lat, cv, markers, rep(mesh.collar), rep(mesh.piece), local, mesh.collar_frames, mesh.collar_multiplicity,
        mesh.eps, params, mesh.geometry,
    )


# ---------------------------------------------------------------------------
# validation


@dataclass
class Violation:
    kind: str
    detail: str


@dataclass
class ValidationReport:
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations

    def kinds(self) -> set:
        return {v.kind for v in self.violations}


def validate(mesh: Mesh, min_angle: float | None = None) -> ValidationReport:
    """Conformity, orientation, tag consistency, angle floor and K_n marker closure."""
    out = []
    cw = _orient(mesh.points, mesh.triangles)
    if np.any(cw):
        out.append(Violation("orientation", f"{int(cw.sum())} clockwise elements, first {int(np.flatnonzero(cw)[0])}"))
    uniq, inc, counts = mesh.edges
    if np.any(counts > 2):
        out.append(Violation("conformity", f"{int(np.sum(counts > 2))} non-manifold edges"))
    hang = _hanging_edges(mesh)
    if hang:
        out.append(Violation("conformity", f"{len(hang)} overlapping boundary edges (hanging nodes)"))
    floor = mesh.params.get("min_angle", 0.0) if min_angle is None else min_angle
    ang = _min_angles(mesh.points, mesh.triangles)
    if np.any(ang < floor):
        out.append(Violation("min_angle", f"{int(np.sum(ang < floor))} elements below {floor} deg (min {ang.min():.3g})"))
    out.extend(_check_tags(mesh, uniq, inc))
    out.extend(_check_curve_markers(mesh))
    return ValidationReport(out)


def _check_tags(mesh: Mesh, uniq, inc) -> list:
    out = []
    if mesh.kind != "fibered":
        return out
    fibered = (mesh.region == TAG_FIBER) | (mesh.region == TAG_ANNULUS)
    if np.any(fibered & (mesh.collar < 0)):
        out.append(Violation("tag-consistency", "fiber elements without a collar"))
        return out
    idx = np.flatnonzero(fibered)
    if len(idx):
        fr = mesh.collar_frames[mesh.collar[idx]]
        loc = mesh.local[idx]
        plane = fr[:, None, 0, :] + loc[..., :1] * fr[:, None, 1, :] + loc[..., 1:2] * fr[:, None, 2, :]
        L = 3.0**-mesh.level
        bad = np.abs(plane - mesh.points[mesh.triangles[idx]]).max(axis=(1, 2)) > 1e-9 * L
        if np.any(bad):
            out.append(Violation("tag-consistency", f"{int(bad.sum())} fiber elements off their collar frame"))
        eps = mesh.eps
        x, t = loc[..., 0], loc[..., 1]
        d = inner_depth(np.clip(x, 0.0, 1.0), eps)
        tol = 1e-9
        inner = mesh.region[idx] == TAG_FIBER
        band_bad = np.where(inner[:, None], t > d + tol, (t < d - tol) | (t > 2 * d + tol)) | (t < -tol)
        a = eps / C1
        pc = mesh.piece[idx]
        lo = np.where(pc == 0, 0.0, np.where(pc == 1, a, 1.0 - a))
        hi = np.where(pc == 0, a, np.where(pc == 1, 1.0 - a, 1.0))
        piece_bad = (x < lo[:, None] - tol) | (x > hi[:, None] + tol)
        nb = int(np.sum(np.any(band_bad | piece_bad, axis=1)))
        if nb:
            out.append(Violation("tag-consistency", f"{nb} fiber elements outside their band or piece"))
    # the interface markers must be exactly the edges where the fiber tag changes
    fib = mesh.region == TAG_FIBER
    a = fib[inc[:, 0]]
    b = np.where(inc[:, 1] >= 0, fib[np.maximum(inc[:, 1], 0)], False)
    change = {tuple(e) for e in uniq[a != b].tolist()}
    marked = {tuple(sorted(e)) for e in mesh.markers.get("gamma", np.zeros((0, 2), int)).tolist()}
    marked |= {tuple(sorted(e)) for e in mesh.markers.get("K_n", np.zeros((0, 2), int)).tolist()}
    missing = change - marked
    if missing:
        out.append(Violation("tag-consistency", f"{len(missing)} tag-changing edges carry no interface marker"))
    extra = {tuple(sorted(e)) for e in mesh.markers.get("gamma", np.zeros((0, 2), int)).tolist()} - change
    if extra:
        out.append(Violation("tag-consistency", f"{len(extra)} interface markers between equal tags"))
    return out


def _check_curve_markers(mesh: Mesh) -> list:
    ed = mesh.markers.get("K_n")
    if ed is None:
        return [Violation("markers", "no K_n markers")]
    if len(ed) == 0:
        return [Violation("markers", "empty K_n marker set")]
    deg = np.bincount(ed.ravel(), minlength=mesh.n_vertices)
    used = np.flatnonzero(deg)
    out = []
    if np.any(deg[used] != 2):
        out.append(Violation("markers", f"{int(np.sum(deg[used] != 2))} K_n marker vertices without degree 2"))
        return out
    g = coo_matrix((np.ones(len(ed)), (ed[:, 0], ed[:, 1])), shape=(mesh.n_vertices,) * 2)
    _, comp = connected_components(g, directed=False)
    if len(np.unique(comp[used])) != 1:
        out.append(Violation("markers", "K_n markers form more than one closed polyline"))
    length = float(np.sum(np.linalg.norm(mesh.points[ed[:, 0]] - mesh.points[ed[:, 1]], axis=1)))
    expect = 3.0 * (4.0 / 3.0) ** mesh.level
    if abs(length - expect) > 1e-9 * expect:
        out.append(Violation("markers", f"K_n marker length {length!r} != {expect!r}"))
    return out


# ---------------------------------------------------------------------------
# export


def write_off(mesh: Mesh, path) -> None:
    """OFF geometry plus a JSON sidecar (``<path>.json``) with tags and markers."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("OFF\n")
        fh.write(f"{mesh.n_vertices} {mesh.n_triangles} 0\n")
        for x, y in mesh.points.tolist():
            fh.write(f"{x!r} {y!r} 0.0\n")
        for a, b, c in mesh.triangles:
            fh.write(f"3 {a} {b} {c}\n")
    with open(f"{path}.json", "w", encoding="utf-8") as fh:
        json.dump(mesh_sidecar(mesh), fh, indent=1, sort_keys=True)


def mesh_sidecar(mesh: Mesh) -> dict:
    return {
        "kind": mesh.kind,
        "level": mesh.level,
        "eps": mesh.eps,
        "params": mesh.params,
        "region": mesh.region.tolist(),
        "region_names": {str(k): v for k, v in TAG_NAMES.items()},
        "collar": None if mesh.collar is None else mesh.collar.tolist(),
        "piece": None if mesh.piece is None else mesh.piece.tolist(),
        "curve_vertex": np.flatnonzero(mesh.curve_vertex).tolist(),
        "markers": {k: v.tolist() for k, v in sorted(mesh.markers.items())},
    }


def read_off(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        words = fh.read().split()
    if not words or words[0] != "OFF":
        raise ValueError(f"{path}: not an OFF file")
    nv, nt = int(words[1]), int(words[2])
    pos = 4
    pts = np.array(words[pos:pos + 3 * nv], dtype=float).reshape(nv, 3)[:, :2]
    pos += 3 * nv
    tris = np.array(words[pos:pos + 4 * nt], dtype=np.int64).reshape(nt, 4)[:, 1:]
    return pts, tris


def summary(mesh: Mesh) -> dict:
    return {
        "kind": mesh.kind,
        "level": mesh.level,
        "vertices": mesh.n_vertices,
        "triangles": mesh.n_triangles,
        "areas": {TAG_NAMES[t]: mesh.region_area(t) for t in sorted(set(mesh.region.tolist()))},
        "min_angle_deg": float(_min_angles(mesh.points, mesh.triangles).min()),
    }


__all__ = [
    "TAG_BULK",
    "TAG_FIBER",
    "TAG_ANNULUS",
    "TAG_EXTERIOR",
    "Mesh",
    "MeshParams",
    "MeshQualityFailure",
    "StitchingFailure",
    "GeometryError",
    "reference_collar",
    "reference_columns",
    "mesh_fibered_domain",
    "mesh_omega_star",
    "mesh_prefractal",
    "refine_uniform",
    "validate",
    "ValidationReport",
    "write_off",
    "read_off",
    "summary",
]
