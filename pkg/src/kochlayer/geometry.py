"""Snowflake maps, pre-fractal curves, cell triangles and fiber collars.

Coordinates that come out of the maps are kept exact (see ``algebraic``).
Every cell triangle of level ``n`` is one triangle of the regular triangular
lattice of spacing ``3**-n`` whose points are ``3**-n * (i + j*omega)`` with
``omega = exp(i*pi/3)``.  Most enumeration below runs on those integer lattice
coordinates and only converts to exact reals when asked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property
from typing import Iterable, Iterator, Sequence

import numpy as np

from .algebraic import HALF, ONE, ROOT3, ZERO, AlgebraicNumber, as_amplitude, point

MAX_LEVEL = 8

# cos and sin of k*pi/3, exact
_COS = [ONE, HALF, -HALF, -ONE, -HALF, HALF]
_SIN = [ZERO, ROOT3 * HALF, ROOT3 * HALF, ZERO, -(ROOT3 * HALF), -(ROOT3 * HALF)]

A = point(0, 0)
B = point(1, 0)
C = point(Fraction(1, 2), AlgebraicNumber(0, Fraction(1, 2)))
D = point(Fraction(1, 2), AlgebraicNumber(0, Fraction(-1, 2)))
E = point(Fraction(3, 2), AlgebraicNumber(0, Fraction(1, 2)))
F = point(Fraction(-1, 2), AlgebraicNumber(0, Fraction(1, 2)))
V0 = (A, B, C)
OMEGA_STAR = (D, E, F)

EPS0 = 0.5 * math.tan(math.pi / 12)
C1 = math.tan(math.pi / 12)
# 2 - sqrt(3) and its half, exactly
C1_EXACT = AlgebraicNumber(2, -1)
EPS0_EXACT = AlgebraicNumber(1, Fraction(-1, 2))


class GeometryError(ValueError):
    pass


class AmplitudeError(GeometryError):
    pass


class LevelError(GeometryError):
    pass


class OverlapViolation(GeometryError):
    def __init__(self, message: str, addresses=()):
        super().__init__(message)
        self.addresses = tuple(addresses)


# ---------------------------------------------------------------------------
# constants


@dataclass(frozen=True)
class Constants:
    """Exponent-dependent constants of the construction."""

    p: float

    def __post_init__(self):
        if not self.p >= 2:
            raise ValueError(f"p must be >= 2, got {self.p}")

    @property
    def p_conj(self) -> float:
        return self.p / (self.p - 1.0)

    @property
    def d_f(self) -> float:
        return math.log(4.0) / math.log(3.0)

    @property
    def eps0(self) -> float:
        return EPS0

    @property
    def c1(self) -> float:
        return C1

    @property
    def c_p(self) -> float:
        return 2.0**self.p + C1**self.p - 2.0

    @property
    def alpha(self) -> float:
        return 1.0 - (2.0 - self.d_f) / self.p

    @property
    def beta(self) -> float:
        return self.d_f * (1.0 - 1.0 / self.p)

    @staticmethod
    def delta(n: int) -> float:
        return 0.75**n

    def fiber_factor(self, eps: float) -> float:
        """Ratio between the weighted fiber energy of a recovery function and its cell energy."""
        return 1.0 + float(eps) * self.c_p / C1

    def as_dict(self) -> dict:
        return {
            "p": self.p,
            "p_conj": self.p_conj,
            "d_f": self.d_f,
            "eps0": self.eps0,
            "c1": self.c1,
            "c_p": self.c_p,
            "alpha": self.alpha,
            "beta": self.beta,
        }


def check_amplitude(eps) -> AlgebraicNumber:
    """Return ``eps`` as an exact number after checking ``0 < eps < eps0``."""
    e = as_amplitude(eps)
    if not (e.sign() > 0 and e < EPS0_EXACT):
        raise AmplitudeError(f"fiber amplitude {float(e)!r} outside (0, {EPS0!r})")
    return e


def eps_rule(n: int, eps_base=None, halving: int = 1) -> AlgebraicNumber:
    """Default amplitude schedule ``eps0 * 2**-(n+1)``, exact."""
    base = EPS0_EXACT if eps_base is None else as_amplitude(eps_base)
    return base * Fraction(1, 2 ** (halving * (n + 1)))


# ---------------------------------------------------------------------------
# similitudes


def _rotate(k: int, pt):
    c, s = _COS[k % 6], _SIN[k % 6]
    x, y = pt
    return (c * x - s * y, s * x + c * y)


@dataclass(frozen=True)
class Similitude:
    """``z -> scale * exp(i*rotation*pi/3) * z + translation``."""

    rotation: int
    scale: Fraction
    translation: tuple

    def __call__(self, pt):
        x, y = _rotate(self.rotation, pt)
        return (x * self.scale + self.translation[0], y * self.scale + self.translation[1])

    def __matmul__(self, other: "Similitude") -> "Similitude":
        t = self(other.translation)
        return Similitude((self.rotation + other.rotation) % 6, self.scale * other.scale, t)

    def inverse(self) -> "Similitude":
        k = (-self.rotation) % 6
        inv = Fraction(1) / self.scale
        tx, ty = _rotate(k, self.translation)
        return Similitude(k, inv, (-tx * inv, -ty * inv))

    @staticmethod
    def identity() -> "Similitude":
        return Similitude(0, Fraction(1), (ZERO, ZERO))

    def apply_float(self, xy: np.ndarray) -> np.ndarray:
        ang = self.rotation * math.pi / 3.0
        c, s = math.cos(ang), math.sin(ang)
        sc = float(self.scale)
        out = np.empty_like(np.asarray(xy, dtype=float))
        out[..., 0] = sc * (c * xy[..., 0] - s * xy[..., 1]) + float(self.translation[0])
        out[..., 1] = sc * (s * xy[..., 0] + c * xy[..., 1]) + float(self.translation[1])
        return out


_THIRD = Fraction(1, 3)
_PSI1 = (
    Similitude(0, _THIRD, (ZERO, ZERO)),
    Similitude(5, _THIRD, (AlgebraicNumber(_THIRD), ZERO)),
    Similitude(1, _THIRD, (HALF, AlgebraicNumber(0, Fraction(-1, 6)))),
    Similitude(0, _THIRD, (AlgebraicNumber(Fraction(2, 3)), ZERO)),
)
# rigid motions carrying side AB onto BC and CA, keeping the triangle in place
_MOTIONS = (
    Similitude.identity(),
    Similitude(2, Fraction(1), B),
    Similitude(4, Fraction(1), C),
)


def side_motion(curve: int) -> Similitude:
    if curve not in (1, 2, 3):
        raise ValueError(f"curve must be 1, 2 or 3, got {curve}")
    return _MOTIONS[curve - 1]


def unit_maps(curve: int) -> tuple[Similitude, ...]:
    """The four maps generating Koch curve ``curve`` (1: AB, 2: BC, 3: CA)."""
    r = side_motion(curve)
    if curve == 1:
        return _PSI1
    rinv = r.inverse()
    return tuple(r @ psi @ rinv for psi in _PSI1)


@dataclass(frozen=True, order=True)
class CellAddress:
    curve: int
    word: tuple[int, ...] = ()

    def __post_init__(self):
        if self.curve not in (1, 2, 3):
            raise ValueError(f"curve must be 1, 2 or 3, got {self.curve}")
        if any(w not in (1, 2, 3, 4) for w in self.word):
            raise ValueError(f"word letters must be in 1..4, got {self.word}")

    @property
    def level(self) -> int:
        return len(self.word)

    def child(self, letter: int) -> "CellAddress":
        return CellAddress(self.curve, self.word + (letter,))

    def label(self) -> str:
        return f"{self.curve}:" + "".join(map(str, self.word))

    @classmethod
    def parse(cls, text: str) -> "CellAddress":
        curve, _, word = text.partition(":")
        return cls(int(curve), tuple(int(c) for c in word))


def compose(address: CellAddress) -> Similitude:
    """Composition of the curve's maps along the address word (first letter outermost)."""
    maps = unit_maps(address.curve)
    out = Similitude.identity()
    for letter in address.word:
        out = out @ maps[letter - 1]
    return out


def cell_triangle(address: CellAddress):
    """Exact corners ``(pA, pB, pC)`` of the cell; ``pA -> pB`` is a segment of K_n.

    These are the images of the curve's own base triangle, so for curve 2 the
    map is applied to ``(B, C, A)`` and for curve 3 to ``(C, A, B)``.
    """
    sim = compose(address)
    base = tuple(side_motion(address.curve)(v) for v in V0)
    return tuple(sim(v) for v in base)


def iter_addresses(n: int, curves: Sequence[int] = (1, 2, 3)) -> Iterator[CellAddress]:
    """Addresses of level ``n`` in traversal order along the closed curve."""
    for curve in curves:
        for word in _words(n):
            yield CellAddress(curve, word)


def _words(n: int):
    if n == 0:
        yield ()
        return
    for head in _words(n - 1):
        for letter in (1, 2, 3, 4):
            yield head + (letter,)


# ---------------------------------------------------------------------------
# lattice helpers
#
# A lattice point (i, j) at level k is 3**-k * (i + j*omega).  Up triangles
# (i, j, 1) have corners (i,j),(i+1,j),(i,j+1); down triangles (i, j, 0) have
# corners (i+1,j),(i+1,j+1),(i,j+1).

LatticeKey = tuple  # (i, j, up)


def rot60(d):
    """Multiply a lattice vector by omega."""
    i, j = d
    return (-j, i + j)


def rot_minus60(d):
    i, j = d
    return (i + j, -i)


def lattice_to_float(ij, level: int) -> tuple[float, float]:
    n3 = float(3**level)
    i, j = ij
    return ((i + 0.5 * j) / n3, (math.sqrt(3.0) / 2.0) * j / n3)


def lattice_array_to_float(ij: np.ndarray, level: int) -> np.ndarray:
    ij = np.asarray(ij, dtype=float)
    n3 = float(3**level)
    out = np.empty(ij.shape, dtype=float)
    out[..., 0] = (ij[..., 0] + 0.5 * ij[..., 1]) / n3
    out[..., 1] = (math.sqrt(3.0) / 2.0) * ij[..., 1] / n3
    return out


def lattice_to_exact(ij, level: int):
    n3 = 3**level
    i, j = ij
    return (
        AlgebraicNumber(Fraction(2 * i + j, 2 * n3)),
        AlgebraicNumber(0, Fraction(j, 2 * n3)),
    )


def exact_to_lattice(pt, level: int) -> tuple[int, int]:
    x, y = pt
    if x.b != 0 or y.a != 0:
        raise GeometryError(f"point {pt} is not a lattice point")
    n3 = 3**level
    j = y.b * 2 * n3
    i = x.a * n3 - j / 2
    if i.denominator != 1 or j.denominator != 1:
        raise GeometryError(f"point {pt} is not on the level-{level} lattice")
    return (int(i), int(j))


def triangle_corners(key: LatticeKey):
    i, j, up = key
    if up:
        return ((i, j), (i + 1, j), (i, j + 1))
    return ((i + 1, j), (i + 1, j + 1), (i, j + 1))


def triangle_of_corners(corners) -> LatticeKey:
    """Lattice key of the unit triangle with the given three lattice corners."""
    pts = sorted(corners)
    i0 = min(c[0] for c in pts)
    j0 = min(c[1] for c in pts)
    cand_up = (i0, j0, 1)
    if sorted(triangle_corners(cand_up)) == pts:
        return cand_up
    cand_dn = (i0, j0, 0)
    if sorted(triangle_corners(cand_dn)) == pts:
        return cand_dn
    raise GeometryError(f"corners {corners} do not form a unit lattice triangle")


def triangle_across(key: LatticeKey, p, q) -> LatticeKey:
    """The lattice triangle sharing edge ``p-q`` with ``key``."""
    corners = triangle_corners(key)
    r = [c for c in corners if c != p and c != q]
    if len(r) != 1:
        raise GeometryError("edge is not an edge of the triangle")
    r = r[0]
    # reflect the third corner through the edge midpoint
    opp = (p[0] + q[0] - r[0], p[1] + q[1] - r[1])
    return triangle_of_corners((p, q, opp))


def children(key: LatticeKey) -> list[LatticeKey]:
    """The nine triangles of the next lattice level inside ``key``."""
    i, j, up = key
    bi, bj = 3 * i, 3 * j
    out = []
    if up:
        for a in range(3):
            for b in range(3):
                if a + b <= 2:
                    out.append((bi + a, bj + b, 1))
                if a + b <= 1:
                    out.append((bi + a, bj + b, 0))
    else:
        for a in range(3):
            for b in range(3):
                if a + b >= 2:
                    out.append((bi + a, bj + b, 0))
                if a + b >= 3:
                    out.append((bi + a, bj + b, 1))
    return sorted(out)


def parent(key: LatticeKey) -> LatticeKey:
    corners = triangle_corners(key)
    ci = sum(c[0] for c in corners) / 3.0 / 3.0
    cj = sum(c[1] for c in corners) / 3.0 / 3.0
    return locate_lattice(ci, cj)


def locate_lattice(ri: float, rj: float) -> LatticeKey:
    """Lattice triangle containing the point with (real) lattice coordinates ``(ri, rj)``."""
    i = math.floor(ri)
    j = math.floor(rj)
    fa, fb = ri - i, rj - j
    return (i, j, 1 if fa + fb < 1.0 else 0)


def float_to_lattice_coords(x, y, level: int):
    n3 = float(3**level)
    rj = np.asarray(y) * (2.0 / math.sqrt(3.0)) * n3
    ri = np.asarray(x) * n3 - 0.5 * rj
    return ri, rj


def omega_star_triangles(level: int) -> list[LatticeKey]:
    """All ``4 * 9**level`` lattice triangles of the outer triangle D, E, F."""
    n3 = 3**level
    out = []
    for i in range(-n3, n3):
        for j in range(-n3, n3):
            if i <= n3 - 1 and j <= n3 - 1 and i + j >= 0:
                out.append((i, j, 1))
            if i <= n3 - 1 and j <= n3 - 1 and i + j >= -1:
                out.append((i, j, 0))
    return sorted(out)


def lattice_triangles_array(keys: Sequence[LatticeKey], level: int) -> np.ndarray:
    """Float corners, shape (m, 3, 2), counter-clockwise."""
    arr = np.array([triangle_corners(k) for k in keys], dtype=float).reshape(-1, 3, 2)
    return lattice_array_to_float(arr, level)


# ---------------------------------------------------------------------------
# pre-fractal curve


@dataclass(frozen=True)
class Cell:
    address: CellAddress
    corners: tuple  # three lattice points, (pA, pB, pC)

    @property
    def key(self) -> LatticeKey:
        return triangle_of_corners(self.corners)


def _curve_cells(level: int) -> list[Cell]:
    """All level-``level`` cells from lattice recursion, in address order."""
    n3 = 3**level
    start = [((0, 0), (n3, 0)), ((n3, 0), (0, n3)), ((0, n3), (0, 0))]
    out: list[Cell] = []
    for curve, (p, q) in enumerate(start, start=1):
        segs = [((), p, q)]
        for _ in range(level):
            nxt = []
            for word, sp, sq in segs:
                d = ((sq[0] - sp[0]) // 3, (sq[1] - sp[1]) // 3)
                p1 = (sp[0] + d[0], sp[1] + d[1])
                bump = rot_minus60(d)
                p2 = (p1[0] + bump[0], p1[1] + bump[1])
                p3 = (sp[0] + 2 * d[0], sp[1] + 2 * d[1])
                nxt.append((word + (1,), sp, p1))
                nxt.append((word + (2,), p1, p2))
                nxt.append((word + (3,), p2, p3))
                nxt.append((word + (4,), p3, sq))
            segs = nxt
        for word, sp, sq in segs:
            d = (sq[0] - sp[0], sq[1] - sp[1])
            r = rot60(d)
            apex = (sp[0] + r[0], sp[1] + r[1])
            out.append(Cell(CellAddress(curve, word), (sp, sq, apex)))
    return out


def _check_level(n: int, max_level: int):
    if n < 0:
        raise LevelError(f"level must be >= 0, got {n}")
    if n > max_level:
        raise LevelError(f"level {n} exceeds the configured maximum {max_level}")


@dataclass(frozen=True)
class Prefractal:
    """Ordered vertex list and segments of the closed curve K_n."""

    level: int
    lattice_vertices: tuple  # lattice points in traversal order, closing back to the first

    def __len__(self):
        return len(self.lattice_vertices)

    @cached_property
    def vertices(self) -> np.ndarray:
        return lattice_array_to_float(np.array(self.lattice_vertices), self.level)

    def exact_vertices(self) -> list:
        return [lattice_to_exact(v, self.level) for v in self.lattice_vertices]

    @property
    def segments(self) -> list[tuple[int, int]]:
        m = len(self.lattice_vertices)
        return [(k, (k + 1) % m) for k in range(m)]

    def segment_lengths(self) -> np.ndarray:
        v = self.vertices
        return np.linalg.norm(np.roll(v, -1, axis=0) - v, axis=1)

    def area(self) -> float:
        v = self.vertices
        x, y = v[:, 0], v[:, 1]
        return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))

    def exact_area(self) -> AlgebraicNumber:
        # shoelace on the lattice: area = (sqrt3/4) * sum(i_k j_{k+1} - i_{k+1} j_k) / 3**(2n)
        v = self.lattice_vertices
        m = len(v)
        s = 0
        for k in range(m):
            i0, j0 = v[k]
            i1, j1 = v[(k + 1) % m]
            s += i0 * j1 - i1 * j0
        return AlgebraicNumber(0, Fraction(s, 4 * 9**self.level))


def prefractal(n: int, max_level: int = MAX_LEVEL) -> Prefractal:
    _check_level(n, max_level)
    cells = _curve_cells(n)
    return Prefractal(n, tuple(c.corners[0] for c in cells))


def snowflake_area_partial(n: int) -> float:
    """Closed-form area of the level-n domain: sqrt3/4 * (1 + (3/5)(1 - (4/9)**n))."""
    return math.sqrt(3.0) / 4.0 * (1.0 + 0.6 * (1.0 - (4.0 / 9.0) ** n))


def snowflake_area_limit() -> float:
    return 2.0 * math.sqrt(3.0) / 5.0


# ---------------------------------------------------------------------------
# fibers


class Band:
    INNER = "inner"
    ANNULUS = "annulus"


class Piece:
    TRI1 = "T1"
    RECT = "R"
    TRI2 = "T2"


@dataclass(frozen=True)
class FiberPatch:
    """One piece of a collar, with its exact polygon in the plane."""

    cell: CellAddress
    side: int
    band: str
    piece: str
    polygon: tuple

    def float_polygon(self) -> np.ndarray:
        return np.array([[float(x), float(y)] for x, y in self.polygon])


def local_pieces(eps) -> dict:
    """Piece polygons of a collar in local coordinates ``(x, depth)``.

    The base side is ``[0, 1] x {0}`` and depth grows away from the cell.
    """
    e = as_amplitude(eps)
    a = e / C1_EXACT
    h = e * HALF
    z, one = ZERO, ONE
    return {
        (Band.INNER, Piece.TRI1): ((z, z), (a, z), (a, h)),
        (Band.INNER, Piece.RECT): ((a, z), (one - a, z), (one - a, h), (a, h)),
        (Band.INNER, Piece.TRI2): ((one - a, z), (one, z), (one - a, h)),
        (Band.ANNULUS, Piece.TRI1): ((z, z), (a, h), (a, e)),
        (Band.ANNULUS, Piece.RECT): ((a, h), (one - a, h), (one - a, e), (a, e)),
        (Band.ANNULUS, Piece.TRI2): ((one, z), (one - a, e), (one - a, h)),
    }


def edge_frame(p, q):
    """Map local ``(x, depth)`` to the plane for the side ``p -> q`` of a counter-clockwise cell."""
    ex = (q[0] - p[0], q[1] - p[1])
    # outward normal: rotate the edge by -90 degrees
    ey = (ex[1], -ex[0])

    def to_plane(loc):
        x, t = loc
        return (p[0] + x * ex[0] + t * ey[0], p[1] + x * ex[1] + t * ey[1])

    return to_plane


def unit_fibers(eps) -> dict:
    """Collars of the unit triangle: ``{side: {(band, piece): polygon}}`` plus the trapezoids.

    Returns a dict keyed by side ``l`` with entries ``pieces``, ``inner`` (A, B, P2, P1
    for side 1) and ``outer`` (A, B, Q2, Q1), all exact.
    """
    e = check_amplitude(eps)
    loc = local_pieces(e)
    a = e / C1_EXACT
    out = {}
    for side, (p, q) in enumerate(((A, B), (B, C), (C, A)), start=1):
        to_plane = edge_frame(p, q)
        pieces = {k: tuple(to_plane(v) for v in poly) for k, poly in loc.items()}
        inner = tuple(to_plane(v) for v in ((ZERO, ZERO), (ONE, ZERO), (ONE - a, e * HALF), (a, e * HALF)))
        outer = tuple(to_plane(v) for v in ((ZERO, ZERO), (ONE, ZERO), (ONE - a, e), (a, e)))
        out[side] = {"pieces": pieces, "inner": inner, "outer": outer, "edge": (p, q)}
    return out


@dataclass
class Collar:
    """The fiber attached to one lattice edge on one side, shared by every cell producing it."""

    index: int
    edge: tuple  # lattice points (p, q), oriented with the producing cell on the left
    host: LatticeKey  # lattice triangle containing the collar
    cells: list  # (CellAddress, side) pairs, address-ordered
    level: int

    @property
    def multiplicity(self) -> int:
        return len(self.cells)

    @property
    def owner(self):
        return self.cells[0]

    def exact_edge(self):
        return tuple(lattice_to_exact(v, self.level) for v in self.edge)

    def float_edge(self) -> np.ndarray:
        return np.array([lattice_to_float(v, self.level) for v in self.edge])

    def frame(self):
        """(origin, tangent, outward normal) as float vectors; local ``(x, t)`` -> origin + x*tangent + t*normal."""
        p, q = self.float_edge()
        ex = q - p
        ey = np.array([ex[1], -ex[0]])
        return p, ex, ey

    def opposite_vertex(self) -> tuple:
        """Lattice corner of the host not on the collar's edge."""
        return next(c for c in triangle_corners(self.host) if c not in self.edge)

    def exact_pieces(self, eps) -> dict:
        to_plane = edge_frame(*self.exact_edge())
        return {k: tuple(to_plane(v) for v in poly) for k, poly in local_pieces(eps).items()}

    def patches(self, eps) -> list[FiberPatch]:
        cell, side = self.owner
        return [FiberPatch(cell, side, band, piece, poly) for (band, piece), poly in self.exact_pieces(eps).items()]

    def to_local(self, xy: np.ndarray) -> np.ndarray:
        o, ex, ey = self.frame()
        d = np.asarray(xy, dtype=float) - o
        ll = float(ex @ ex)
        return np.stack([d @ ex / ll, d @ ey / ll], axis=-1)

    def to_plane(self, loc: np.ndarray) -> np.ndarray:
        o, ex, ey = self.frame()
        loc = np.asarray(loc, dtype=float)
        return o + loc[..., :1] * ex + loc[..., 1:2] * ey


def inner_depth(x, eps: float):
    """Depth of the inner band at local abscissa ``x`` (unit edge)."""
    x = np.asarray(x, dtype=float)
    a = eps / C1
    return np.where(x < a, C1 * x / 2.0, np.where(x > 1.0 - a, C1 * (1.0 - x) / 2.0, eps / 2.0))


def outer_depth(x, eps: float):
    return 2.0 * inner_depth(x, eps)


# ---------------------------------------------------------------------------
# domain


@dataclass
class DomainGeometry:
    level: int
    eps: AlgebraicNumber
    curve: Prefractal
    cells: list  # list[Cell], address order
    collars: list  # list[Collar], deduplicated, deterministic order
    interior: frozenset  # lattice keys (level n) of triangles inside Omega_n

    omega_star: tuple = OMEGA_STAR

    @property
    def n(self) -> int:
        return self.level

    @property
    def eps_float(self) -> float:
        return float(self.eps)

    @property
    def edge_length(self) -> float:
        return 3.0**-self.level

    @cached_property
    def collars_by_host(self) -> dict:
        out: dict = {}
        for c in self.collars:
            out.setdefault(c.host, []).append(c)
        return out

    @cached_property
    def collars_by_edge(self) -> dict:
        out: dict = {}
        for c in self.collars:
            out.setdefault(frozenset(c.edge), []).append(c)
        return out

    @cached_property
    def cell_keys(self) -> dict:
        """Lattice key of each distinct cell triangle -> addresses producing it."""
        out: dict = {}
        for cell in self.cells:
            out.setdefault(cell.key, []).append(cell.address)
        return out

    @cached_property
    def curve_edges(self) -> frozenset:
        v = self.curve.lattice_vertices
        m = len(v)
        return frozenset(frozenset((v[k], v[(k + 1) % m])) for k in range(m))

    @property
    def multiplicities(self) -> np.ndarray:
        return np.array([c.multiplicity for c in self.collars], dtype=int)

    def patches(self) -> list[FiberPatch]:
        out = []
        for c in self.collars:
            out.extend(c.patches(self.eps))
        return out

    # areas ---------------------------------------------------------------
    def omega_n_area(self) -> float:
        return self.curve.area()

    def collar_area(self, band: str = "inner") -> float:
        """Area of one collar (all collars are congruent)."""
        e = self.eps_float
        a = e / C1
        inner = (1.0 - a) * e / 2.0
        if band == "outer":
            inner *= 2.0
        elif band == "annulus":
            pass
        return inner * self.edge_length**2

    def sigma_area(self, band: str = "inner") -> float:
        """Area of the union of inner bands (``inner``) or of full collars (``outer``)."""
        return len(self.collars) * self.collar_area(band)

    def exterior_collar_area(self) -> float:
        return sum(self.collar_area("outer") for c in self.collars if c.host not in self.interior)

    def domain_area(self) -> float:
        return self.omega_n_area() + self.exterior_collar_area()

    # exact corner points -------------------------------------------------
    def gamma_segments(self) -> list:
        """Segments of the boundary of the inner fiber that are not on K_n, as float pairs."""
        counts: dict = {}
        e = self.eps
        a = e / C1_EXACT
        for c in self.collars:
            to_plane = edge_frame(*c.exact_edge())
            pts = [
                to_plane((ZERO, ZERO)),
                to_plane((ONE, ZERO)),
                to_plane((ONE - a, e * HALF)),
                to_plane((a, e * HALF)),
            ]
            for k in range(4):
                seg = frozenset((pts[k], pts[(k + 1) % 4]))
                counts[seg] = counts.get(seg, 0) + 1
        curve = {frozenset(lattice_to_exact(v, self.level) for v in s) for s in self.curve_edges}
        out = []
        for seg, cnt in counts.items():
            if cnt == 1 and seg not in curve:
                p, q = sorted(seg, key=lambda pt: (float(pt[0]), float(pt[1])))
                out.append(((float(p[0]), float(p[1])), (float(q[0]), float(q[1]))))
        out.sort()
        return out

    def to_json(self) -> dict:
        def ex(pt):
            return {"x": pt[0].to_json(), "y": pt[1].to_json(), "float": [float(pt[0]), float(pt[1])]}

        return {
            "level": self.level,
            "eps": self.eps.to_json(),
            "eps_float": self.eps_float,
            "omega_star": [ex(v) for v in self.omega_star],
            "vertices": [ex(v) for v in self.curve.exact_vertices()],
            "collars": [
                {
                    "index": c.index,
                    "edge": [ex(v) for v in c.exact_edge()],
                    "host": list(c.host),
                    "cells": [[addr.label(), side] for addr, side in c.cells],
                    "inner": [ex(v) for v in _trapezoid(c, self.eps, HALF)],
                    "outer": [ex(v) for v in _trapezoid(c, self.eps, ONE)],
                }
                for c in self.collars
            ],
        }


def _trapezoid(collar: Collar, eps, depth_factor):
    e = as_amplitude(eps)
    a = e / C1_EXACT
    to_plane = edge_frame(*collar.exact_edge())
    d = e * depth_factor
    return [to_plane(v) for v in ((ZERO, ZERO), (ONE, ZERO), (ONE - a, d), (a, d))]


def interior_triangles(n: int) -> frozenset:
    """Lattice triangles (level n) making up the pre-fractal domain."""
    tris = {(0, 0, 1)}
    for level in range(1, n + 1):
        nxt = set()
        for key in tris:
            nxt.update(children(key))
        for cell in _curve_cells(level):
            if cell.address.word[-1] == 2:
                nxt.add(cell.key)
        tris = nxt
    return frozenset(tris)


def _build_collars(cells: list[Cell], level: int) -> list[Collar]:
    by_key: dict = {}
    order = []
    for cell in cells:
        pa, pb, pc = cell.corners
        ckey = cell.key
        for side, (p, q) in enumerate(((pa, pb), (pb, pc), (pc, pa)), start=1):
            host = triangle_across(ckey, p, q)
            ident = (frozenset((p, q)), host)
            if ident not in by_key:
                col = Collar(len(order), (p, q), host, [], level)
                by_key[ident] = col
                order.append(col)
            by_key[ident].cells.append((cell.address, side))
    return order


def check_overlaps(geom: DomainGeometry, rel_tol: float = 1e-9) -> None:
    """Raise OverlapViolation if two distinct outer collars share positive area."""
    from shapely.geometry import Polygon
    from shapely.strtree import STRtree

    polys = [Polygon([(float(x), float(y)) for x, y in _trapezoid(c, geom.eps, ONE)]) for c in geom.collars]
    tree = STRtree(polys)
    ref = geom.collar_area("outer")
    for k, poly in enumerate(polys):
        for m in tree.query(poly):
            m = int(m)
            if m <= k:
                continue
            inter = poly.intersection(polys[m]).area
            if inter > rel_tol * ref:
                a, b = geom.collars[k], geom.collars[m]
                raise OverlapViolation(
                    f"collars {k} and {m} overlap with area {inter:.3e}",
                    addresses=[a.owner[0].label(), b.owner[0].label()],
                )


def build_domain(n: int, eps, check: bool = True, max_level: int = MAX_LEVEL) -> DomainGeometry:
    e = check_amplitude(eps)
    _check_level(n, max_level)
    cells = _curve_cells(n)
    curve = Prefractal(n, tuple(c.corners[0] for c in cells))
    collars = _build_collars(cells, n)
    geom = DomainGeometry(n, e, curve, cells, collars, interior_triangles(n))
    if check:
        check_overlaps(geom)
    return geom


# ---------------------------------------------------------------------------
# point classification


class Region:
    OUTSIDE = "outside"
    BULK = "bulk"
    INNER = "inner-fiber"
    ANNULUS = "annulus"


def locate(pt, geom: DomainGeometry, tol: float = 1e-12):
    """Region tag of a point, with the owning collar when it is in a fiber.

    Points on a boundary shared by several regions resolve to the inner fiber
    first, then the annulus.
    """
    x, y = float(pt[0]), float(pt[1])
    n = geom.level
    ri, rj = float_to_lattice_coords(x, y, n)
    ri, rj = float(ri), float(rj)
    keys = {locate_lattice(ri + di, rj + dj) for di in (-1e-9, 0.0, 1e-9) for dj in (-1e-9, 0.0, 1e-9)}
    eps = geom.eps_float
    best = None
    for key in sorted(keys):
        for col in geom.collars_by_host.get(key, ()):
            lx, lt = col.to_local(np.array([x, y]))
            if lx < -tol or lx > 1.0 + tol or lt < -tol:
                continue
            d_in = float(inner_depth(min(max(lx, 0.0), 1.0), eps))
            if lt <= d_in + tol:
                return Region.INNER, col
            if lt <= 2.0 * d_in + tol and best is None:
                best = (Region.ANNULUS, col)
    if best is not None:
        return best
    if any(k in geom.interior for k in keys):
        return Region.BULK, None
    return Region.OUTSIDE, None


def hausdorff_vertices(a: np.ndarray, b: np.ndarray) -> float:
    from scipy.spatial import cKDTree

    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float(max(da.max(), db.max()))


def addresses_of(cells: Iterable[Cell]) -> list[CellAddress]:
    return [c.address for c in cells]


def cell_multiplicity_histogram(geom: DomainGeometry) -> dict:
    hist: dict = {}
    for addrs in geom.cell_keys.values():
        hist[len(addrs)] = hist.get(len(addrs), 0) + 1
    return dict(sorted(hist.items()))


__all__ = [
    "A",
    "B",
    "C",
    "D",
    "E",
    "F",
    "V0",
    "OMEGA_STAR",
    "EPS0",
    "C1",
    "Constants",
    "Similitude",
    "CellAddress",
    "Cell",
    "Collar",
    "FiberPatch",
    "DomainGeometry",
    "Prefractal",
    "Region",
    "OverlapViolation",
    "AmplitudeError",
    "LevelError",
    "unit_maps",
    "compose",
    "cell_triangle",
    "prefractal",
    "unit_fibers",
    "build_domain",
    "locate",
]
