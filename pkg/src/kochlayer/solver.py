"""Minimizers of the discrete functionals: the layered problem and the fractal proxy."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.sparse import diags
from scipy.sparse.linalg import cg, splu

from .fem import DiscreteFunctional, EnergyBreakdown, FemFunction
from .fractal_energy import cell_graph, energy_scale
from .geometry import build_domain
from .mesh import Mesh, MeshParams, mesh_fibered_domain, mesh_prefractal
from .weights import ConductivityField, WeightField

log = logging.getLogger(__name__)


class NonConvergence(RuntimeError):
    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace or []


class GraphNodeOutsideMesh(RuntimeError):
    pass


@dataclass(frozen=True)
class SolveConfig:
    p: float = 2.0
    eta_schedule: tuple = (1e-2, 1e-4, 1e-6, 1e-8, 1e-10)
    tol: float = 1e-10  # relative residual, or backward error at the round-off floor
    max_iter: int = 60  # Newton steps per stage
    armijo: float = 1e-4
    backtrack: float = 0.5
    linear_solver: str = "direct"  # or "cg"
    threads: int = 1

    def __post_init__(self):
        if self.tol <= 0 or self.max_iter <= 0:
            raise ValueError("tolerance and iteration cap must be positive")
        sched = tuple(self.eta_schedule)
        if any(b >= a for a, b in zip(sched, sched[1:])) or any(e < 0 for e in sched):
            raise ValueError("eta schedule must be positive and decreasing")
        if self.linear_solver not in ("direct", "cg"):
            raise ValueError(f"unknown linear solver {self.linear_solver!r}")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["eta_schedule"] = list(self.eta_schedule)
        return d


@dataclass(eq=False)
class SolveResult:
    u: FemFunction
    value: float
    breakdown: EnergyBreakdown
    residual: float
    trace: list
    converged: bool
    config: SolveConfig
    functional: DiscreteFunctional = field(repr=False)
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "meta": self.meta,
            "config": self.config.as_dict(),
            "value": self.value,
            "residual": self.residual,
            "converged": self.converged,
            "breakdown": self.breakdown.as_dict(),
            "iterations": len(self.trace),
            "values": [float(v) for v in self.u.values],
        }


def _linear_solve(H, rhs, kind: str):
    if kind == "cg":
        d = H.diagonal()
        x, info = cg(H, rhs, rtol=1e-12, maxiter=20 * H.shape[0], M=diags(1.0 / np.where(d > 0, d, 1.0)))
        if info != 0:
            raise NonConvergence(f"inner CG did not converge (info={info})")
        return x
    # SPD: symmetric ordering with diagonal pivots keeps the fill near Cholesky's
    lu = splu(H.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
    return lu.solve(rhs)


def relative_residual(fun: DiscreteFunctional, u: np.ndarray, eta: float = 0.0) -> float:
    """``||Phi'(u) - b|| / ||b||`` (absolute when the load vanishes)."""
    rn = float(np.linalg.norm(fun.gradient(u, eta)))
    scale = float(np.linalg.norm(fun.b))
    return rn / scale if scale > 0 else rn


def _magnitude(fun: DiscreteFunctional, u: np.ndarray) -> np.ndarray:
    """Nodal ``|b| + |H(u)| |u|``: the size of the terms that cancel in the residual."""
    H = fun.hessian(u, 1e-12)
    H.data = np.abs(H.data)
    return np.abs(fun.b) + H @ np.abs(u)


def backward_error(fun: DiscreteFunctional, u: np.ndarray) -> float:
    """Normwise ``||r|| / || |b| + |H||u| ||``; reaches machine precision on stiff fibered meshes."""
    rn = float(np.linalg.norm(fun.gradient(u, 0.0)))
    scale = float(np.linalg.norm(_magnitude(fun, u)))
    return rn / scale if scale > 0 else rn


def minimize(fun: DiscreteFunctional, config: SolveConfig, u0: np.ndarray | None = None) -> tuple:
    """Damped Newton with eta continuation; returns (u, trace, converged)."""
    trace = []
    p = fun.p
    # p = 2 start: the quadratic problem with the same coefficients
    if u0 is None:
        if p == 2.0:
            H = fun.hessian(np.zeros(fun.n), 0.0)
        else:
            q = DiscreteFunctional.__new__(DiscreteFunctional)
            q.__dict__.update(fun.__dict__)
            q.p, q.degree = 2.0, 4
            H = q.hessian(np.zeros(fun.n), 0.0)
        u = _linear_solve(H, fun.b, config.linear_solver)
    else:
        u = np.array(u0, dtype=float)
    if p == 2.0:
        H = fun.hessian(u)
        res = relative_residual(fun, u)
        # iterative refinement guards against pivoting round-off
        for it in range(1, 4):
            un = u - _linear_solve(H, fun.gradient(u), config.linear_solver)
            rn = relative_residual(fun, un)
            if rn >= res:
                break
            u, res = un, rn
        return u, _closing(fun, u, trace, 0), _ok(fun, u, config)
    bnorm = float(np.linalg.norm(fun.b))
    for stage, eta in enumerate(config.eta_schedule):
        last = stage == len(config.eta_schedule) - 1
        stage_tol = config.tol if last else max(config.tol, 1e-2 * eta)
        J = fun.value(u, eta)
        best, stall = math.inf, 0
        for it in range(1, config.max_iter + 1):
            g = fun.gradient(u, eta)
            gn = float(np.linalg.norm(g)) / (bnorm or 1.0)
            if gn <= stage_tol:
                break
            # round-off floor: no residual decrease over several full steps
            stall = stall + 1 if gn >= 0.5 * best else 0
            best = min(best, gn)
            if stall >= 4:
                break
            H = fun.hessian(u, eta)
            d = _linear_solve(H, -g, config.linear_solver)
            slope = float(g @ d)
            if slope >= 0:
                d = -g
                slope = -float(g @ g)
            s = 1.0
            while True:
                un = u + s * d
                Jn = fun.value(un, eta)
                if Jn <= J + config.armijo * s * slope + 1e-15 * abs(J):
                    break
                s *= config.backtrack
                if s < 1e-12:
                    break
            if s < 1e-12:
                trace.append({"stage": stage, "eta": eta, "iter": it, "value": J, "residual": gn, "step": 0.0})
                break
            u, J = un, Jn
            trace.append({"stage": stage, "eta": eta, "iter": it, "value": J, "residual": gn, "step": s})
    return u, _closing(fun, u, trace, len(config.eta_schedule)), _ok(fun, u, config)


def _closing(fun, u, trace, stage) -> list:
    trace.append({"stage": stage, "eta": 0.0, "iter": 0, "value": fun.value(u),
                  "residual": relative_residual(fun, u), "backward_error": backward_error(fun, u), "step": 0.0})
    return trace


def _ok(fun, u, config) -> bool:
    return relative_residual(fun, u) <= config.tol or backward_error(fun, u) <= config.tol


def _finish(fun: DiscreteFunctional, u, trace, ok, config, meta, strict: bool) -> SolveResult:
    res = min(trace[-1]["residual"], trace[-1]["backward_error"])
    meta = {**meta, "relative_residual": trace[-1]["residual"], "backward_error": trace[-1]["backward_error"],
            "newton_steps": len(trace) - 1}
    if not ok and strict:
        raise NonConvergence(f"residual {res:.3e} above tolerance {config.tol:.1e}", trace)
    return SolveResult(FemFunction(fun.mesh, u), fun.value(u), fun.breakdown(u), res, trace, ok, config, fun, meta)


def solve_prehomogenized(n: int, eps, p: float, f, params: MeshParams | None = None,
                         config: SolveConfig | None = None, mesh: Mesh | None = None, semantics: str = "set",
                         u0=None, strict: bool = True) -> SolveResult:
    """Minimize ``Phi_eps^(n)[u] - int f u`` over P1 functions on the fibered mesh."""
    config = config or SolveConfig(p=p)
    if config.p != p:
        config = SolveConfig(**{**config.as_dict(), "p": p, "eta_schedule": tuple(config.eta_schedule)})
    t0 = time.perf_counter()
    if mesh is None:
        mesh = mesh_fibered_domain(build_domain(n, eps), params, threads=config.threads)
    cond = ConductivityField(WeightField(mesh.geometry, p), semantics)
    fun = DiscreteFunctional(mesh, p, cond, f, threads=config.threads)
    u, trace, ok = minimize(fun, config, u0)
    meta = {"problem": "layered", "n": n, "eps": float(mesh.eps), "p": p, "semantics": semantics,
            "vertices": mesh.n_vertices, "triangles": mesh.n_triangles, "runtime_s": time.perf_counter() - t0}
    return _finish(fun, u, trace, ok, config, meta, strict)


def fractal_pairs(mesh: Mesh, m: int, convention: str = "all-pairs-unordered", semantics: str = "set"):
    """Mesh-vertex pairs of the level-m cell graph; every graph node must be a mesh vertex."""
    g = cell_graph(m, convention, semantics)
    lookup = mesh.vertex_of_lattice() if mesh.level == m else None
    if lookup is None:
        raise GraphNodeOutsideMesh(f"mesh level {mesh.level} does not carry the level-{m} lattice")
    idx = np.empty(g.n_nodes, dtype=np.int64)
    for k, v in enumerate(g.lattice_nodes.tolist()):
        j = lookup.get((int(v[0]), int(v[1])))
        if j is None:
            raise GraphNodeOutsideMesh(f"graph node {tuple(v)} is not a vertex of the level-{m} mesh")
        idx[k] = j
    return idx[g.pairs()], g


def solve_fractal(m: int, p: float, f, refine: int = 0, config: SolveConfig | None = None,
                  convention: str = "all-pairs-unordered", semantics: str = "set", u0=None,
                  strict: bool = True) -> SolveResult:
    """Galerkin proxy on the level-m domain: bulk p-energy plus the level-m cell energy of the trace."""
    config = config or SolveConfig(p=p)
    t0 = time.perf_counter()
    mesh = mesh_prefractal(m, refine)
    pairs, _ = fractal_pairs(mesh, m, convention, semantics)
    weight = energy_scale(m, p) * p  # pair kernel divides by p
    fun = DiscreteFunctional(mesh, p, None, f, pairs=pairs, pair_weight=weight, threads=config.threads)
    u, trace, ok = minimize(fun, config, u0)
    meta = {"problem": "fractal", "m": m, "refine": refine, "p": p, "convention": convention,
            "semantics": semantics, "vertices": mesh.n_vertices, "triangles": mesh.n_triangles,
            "runtime_s": time.perf_counter() - t0}
    return _finish(fun, u, trace, ok, config, meta, strict)


def verify_weak_form(result: SolveResult, n_random: int = 20, seed: int = 0, u=None) -> dict:
    """Largest normalized ``|Phi'(u)[v] - int f v|`` over basis and random directions.

    Each pairing is divided by the same pairing taken with absolute values, so the
    measure stays meaningful where fiber coefficients dwarf the load.
    """
    fun = result.functional
    vals = result.u.values if u is None else np.asarray(u, dtype=float)
    r = fun.gradient(vals, 0.0)
    mag = _magnitude(fun, vals)
    tiny = np.finfo(float).tiny
    basis = float(np.max(np.abs(r) / np.maximum(mag, tiny)))
    rng = np.random.default_rng(seed)
    rand = 0.0
    for _ in range(n_random):
        v = rng.standard_normal(len(vals))
        rand = max(rand, abs(float(r @ v)) / max(float(mag @ np.abs(v)), tiny))
    return {"basis": basis, "random": rand, "max": max(basis, rand)}


def uniqueness_probe(fun: DiscreteFunctional, config: SolveConfig, starts: int = 5, seed: int = 0,
                     scale: float = 1.0) -> dict:
    """Minimize from random initial iterates; report the largest nodal spread of the minimizers."""
    rng = np.random.default_rng(seed)
    sols = []
    for _ in range(starts):
        u0 = scale * rng.standard_normal(fun.n)
        u, _, ok = minimize(fun, config, u0)
        sols.append(u)
    ref = sols[0]
    spread = max(float(np.max(np.abs(s - ref))) for s in sols)
    return {"starts": starts, "spread": spread}


def regularization_gap(fun: DiscreteFunctional, eta: float, config: SolveConfig) -> float:
    """L2-like nodal gap between minimizers for ``eta`` and ``eta/10`` (reported, not asserted)."""
    out = []
    for e in (eta, eta / 10.0):
        c = SolveConfig(**{**config.as_dict(), "eta_schedule": (e,)})
        u, _, _ = minimize(fun, c)
        out.append(u)
    d = out[0] - out[1]
    return math.sqrt(float(np.sum(d * d) / len(d)))


__all__ = [
    "SolveConfig",
    "SolveResult",
    "NonConvergence",
    "GraphNodeOutsideMesh",
    "minimize",
    "relative_residual",
    "backward_error",
    "solve_prehomogenized",
    "solve_fractal",
    "fractal_pairs",
    "verify_weak_form",
    "uniqueness_probe",
    "regularization_gap",
]
