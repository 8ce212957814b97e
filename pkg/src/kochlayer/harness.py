"""Convergence experiments over a level range, and their reports."""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import logging
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import catalog
from .algebraic import AlgebraicNumber, as_amplitude
from .fem import DiscreteFunctional, interpolate_nodal, l2_distance_omega_star, lp_mass
from .geometry import EPS0_EXACT, build_domain, eps_rule
from .mesh import MeshParams, mesh_fibered_domain
from .operators import fiber_identity, liminf_sides, recovery_sequence
from .solver import SolveConfig, solve_fractal, solve_prehomogenized
from .weights import ConductivityField, WeightField, muckenhoupt_diagnostic

log = logging.getLogger(__name__)

LEVEL_CAP = 5
SEMANTICS = ("set", "multiset")


class PlanError(ValueError):
    """A malformed experiment plan; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name
        self.message = message


@dataclass(frozen=True)
class ExperimentPlan:
    p: tuple = (2.0,)
    n_min: int = 1
    n_max: int = 3
    eps0: AlgebraicNumber = EPS0_EXACT
    eps_halving: int = 1  # eps_n = eps0 * 2^(-halving (n+1))
    f: str = "poly"
    traces: tuple = ("dec-010", "dec-mixed", "holder-a", "holder-b", "const")
    smooth: tuple = tuple(catalog.SMOOTH)
    solved: tuple = ("poly", "one")  # loads whose solutions enter the liminf suite
    mesh: MeshParams = field(default_factory=MeshParams)
    m_ref: int | None = None
    ref_refine: int = 0
    semantics: str = "set"
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.n_min < 0 or self.n_max > LEVEL_CAP:
            raise PlanError("plan.levels", f"levels must lie in 0..{LEVEL_CAP}")
        if not (0 < self.eps0 <= EPS0_EXACT):
            raise PlanError("eps.eps0", f"must lie in (0, {float(EPS0_EXACT)!r}]")
        if self.eps_halving < 1:
            raise PlanError("eps.halving", "must be a positive integer")
        if any(p < 2.0 for p in self.p):
            raise PlanError("plan.p", "exponents below 2 are not supported")
        if self.semantics not in SEMANTICS:
            raise PlanError("plan.semantics", f"choose from {SEMANTICS}")
        if self.threads < 1:
            raise PlanError("plan.threads", "must be at least 1")
        if self.f not in catalog.LOADS:
            raise PlanError("plan.f", f"unknown load {self.f!r}")
        for name in self.traces:
            if name not in catalog.trace_names():
                raise PlanError("plan.traces", f"unknown trace {name!r}")
        for name in self.smooth:
            if name not in catalog.SMOOTH:
                raise PlanError("plan.smooth", f"unknown function {name!r}")
        for name in self.solved:
            if name not in catalog.LOADS:
                raise PlanError("plan.solved", f"unknown load {name!r}")

    @property
    def levels(self) -> range:
        return range(self.n_min, self.n_max + 1)

    @property
    def reference_level(self) -> int:
        return self.n_max + 1 if self.m_ref is None else self.m_ref

    def eps(self, n: int) -> AlgebraicNumber:
        return eps_rule(n, self.eps0, self.eps_halving)

    def delta(self, n: int) -> float:
        return 0.75**n

    def as_dict(self) -> dict:
        return {
            "p": [float(p) for p in self.p],
            "n_min": self.n_min,
            "n_max": self.n_max,
            "eps0": self.eps0.to_json(),
            "eps_halving": self.eps_halving,
            "f": self.f,
            "traces": list(self.traces),
            "smooth": list(self.smooth),
            "solved": list(self.solved),
            "mesh": self.mesh.as_dict(),
            "m_ref": self.reference_level,
            "ref_refine": self.ref_refine,
            "semantics": self.semantics,
            "seed": self.seed,
            "threads": self.threads,
        }

    def config_hash(self) -> str:
        # thread count does not change any number, so it stays out of the hash
        d = {k: v for k, v in self.as_dict().items() if k != "threads"}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _list(raw: str, conv, name: str) -> tuple:
    try:
        return tuple(conv(t.strip()) for t in raw.split(",") if t.strip())
    except ValueError as exc:
        raise PlanError(name, str(exc)) from None


def _levels(raw: str) -> tuple[int, int]:
    raw = raw.strip()
    try:
        if ".." in raw:
            a, b = raw.split("..")
            return int(a), int(b)
        return int(raw), int(raw)
    except ValueError:
        raise PlanError("plan.levels", f"expected 'a..b', got {raw!r}") from None


_PLAN_KEYS = {"p", "levels", "f", "traces", "smooth", "solved", "m_ref", "ref_refine", "semantics", "seed", "threads"}
_EPS_KEYS = {"eps0", "halving"}


def parse_plan(text: str, source: str = "<plan>") -> ExperimentPlan:
    """Plan from a sectioned key-value file: ``[plan]``, ``[eps]`` and ``[mesh]``."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise PlanError("file", str(exc).replace("\n", " ")) from None
    for sec in cp.sections():
        if sec not in ("plan", "eps", "mesh"):
            raise PlanError(sec, "unknown section")
    kw: dict = {}
    sec = cp["plan"] if cp.has_section("plan") else {}
    for key in sec:
        if key not in _PLAN_KEYS:
            raise PlanError(f"plan.{key}", "unknown key")
    if "p" in sec:
        kw["p"] = _list(sec["p"], float, "plan.p")
    if "levels" in sec:
        kw["n_min"], kw["n_max"] = _levels(sec["levels"])
    for key in ("f", "semantics"):
        if key in sec:
            kw[key] = sec[key].strip()
    for key in ("traces", "smooth", "solved"):
        if key in sec:
            kw[key] = _list(sec[key], str, f"plan.{key}")
    for key in ("m_ref", "ref_refine", "seed", "threads"):
        if key in sec:
            try:
                kw[key] = int(sec[key])
            except ValueError:
                raise PlanError(f"plan.{key}", f"expected an integer, got {sec[key]!r}") from None
    if cp.has_section("eps"):
        for key in cp["eps"]:
            if key not in _EPS_KEYS:
                raise PlanError(f"eps.{key}", "unknown key")
        if "eps0" in cp["eps"]:
            try:
                kw["eps0"] = as_amplitude(Fraction(cp["eps"]["eps0"].strip()))
            except (ValueError, ZeroDivisionError):
                raise PlanError("eps.eps0", f"expected a rational number, got {cp['eps']['eps0']!r}") from None
        if "halving" in cp["eps"]:
            try:
                kw["eps_halving"] = int(cp["eps"]["halving"])
            except ValueError:
                raise PlanError("eps.halving", "expected an integer") from None
    if cp.has_section("mesh"):
        names = {f.name: f.type for f in fields(MeshParams)}
        mk = {}
        for key, raw in cp["mesh"].items():
            if key not in names:
                raise PlanError(f"mesh.{key}", "unknown key")
            try:
                mk[key] = None if raw.strip() == "none" else (int(raw) if "int" in str(names[key]) else float(raw))
            except ValueError:
                raise PlanError(f"mesh.{key}", f"not a number: {raw!r}") from None
        try:
            kw["mesh"] = MeshParams(**mk)
        except (TypeError, ValueError) as exc:
            raise PlanError("mesh", str(exc)) from None
    return ExperimentPlan(**kw)


def read_plan(path) -> ExperimentPlan:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise PlanError("file", f"cannot read {path}: {exc}") from None
    return parse_plan(text, str(path))


@dataclass
class ConvergenceReport:
    suite: str
    columns: tuple
    rows: list
    meta: dict
    runtimes: list = field(default_factory=list)  # parallel to rows; kept out of the JSON
    warnings: list = field(default_factory=list)

    @property
    def failed(self) -> list:
        return [r for r in self.rows if r.get("status", "ok") != "ok"]

    def column(self, name: str, **where) -> list:
        return [r[name] for r in self.rows if all(r.get(k) == v for k, v in where.items())]

    def to_json(self) -> dict:
        return {"suite": self.suite, "columns": list(self.columns), "rows": self.rows, "meta": self.meta,
                "warnings": self.warnings}

    @classmethod
    def from_json(cls, data: dict) -> "ConvergenceReport":
        return cls(data["suite"], tuple(data["columns"]), data["rows"], data["meta"], [], data.get("warnings", []))


def _versions() -> dict:
    from importlib import metadata

    from . import kernels

    out = {"backend": kernels.BACKEND}
    for pkg in ("kochlayer", "numpy", "scipy", "shapely", "triangle"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = "unknown"
    return out


def _meta(plan: ExperimentPlan, suite: str, **extra) -> dict:
    return {"suite": suite, "config_hash": plan.config_hash(), "plan": plan.as_dict(), "versions": _versions(),
            "conventions": {"semantics": plan.semantics, "delta": "(3/4)^n",
                            "eps_rule": f"eps0 * 2^-({plan.eps_halving}(n+1))"}, **extra}


def _meshes(plan: ExperimentPlan) -> dict:
    return {n: mesh_fibered_domain(build_domain(n, plan.eps(n)), plan.mesh) for n in plan.levels}


def _run_cells(plan: ExperimentPlan, cells: list, work) -> tuple[list, list]:
    """Evaluate ``work(cell)`` for every cell, concurrently, keeping plan order."""

    def timed(cell):
        t0 = time.perf_counter()
        try:
            rows = work(cell)
        except Exception as exc:  # a failed cell is recorded, not fatal
            log.exception("cell %s failed", cell)
            rows = [{"status": f"failed: {type(exc).__name__}: {exc}", **cell.get("keys", {})}]
        return rows, time.perf_counter() - t0

    if plan.threads > 1:
        with ThreadPoolExecutor(plan.threads) as pool:
            results = list(pool.map(timed, cells))
    else:
        results = [timed(c) for c in cells]
    rows, times = [], []
    for rs, dt in results:
        rows.extend(rs)
        times.extend([dt / max(len(rs), 1)] * len(rs))
    return rows, times


def _complete(rows: list, columns: tuple) -> list:
    return [{c: r.get(c) for c in columns} for r in rows]


LIMSUP_COLUMNS = ("p", "n", "eps", "trace", "fiber_weighted", "cell_energy", "factor", "identity_error",
                  "annulus_mass", "fiber_mass", "annulus_dirichlet", "bulk_dirichlet", "phi_n", "phi_proxy",
                  "annulus_ratio", "predicted_ratio", "status")


def run_limsup_suite(plan: ExperimentPlan) -> ConvergenceReport:
    """Recovery sequences for each trace: identity factor, vanishing annulus and fiber terms."""
    meshes = _meshes(plan)
    cells = [{"p": p, "trace": t, "keys": {"p": p, "trace": t}} for p in plan.p for t in plan.traces]

    def work(cell):
        p, name = cell["p"], cell["trace"]
        out = []
        for n in plan.levels:
            mesh = meshes[n]
            rec = recovery_sequence(catalog.trace(name, n, p, plan.semantics), n, mesh.geometry.eps, mesh=mesh)
            ident = fiber_identity(rec, p, plan.semantics)
            cond = ConductivityField(WeightField(mesh.geometry, p), plan.semantics)
            bd = DiscreteFunctional(mesh, p, cond).breakdown(rec.function.values)
            u = rec.function
            bulk_mass = lp_mass(u, p, ("bulk",)) / p
            out.append({
                "p": p, "n": n, "eps": float(mesh.eps), "trace": name,
                "fiber_weighted": ident["lhs"], "cell_energy": ident["cell_energy"], "factor": ident["factor"],
                "identity_error": ident["relative_error"],
                "annulus_mass": lp_mass(u, p, ("annulus",)) / p, "fiber_mass": lp_mass(u, p, ("fiber",)) / p,
                "annulus_dirichlet": bd.annulus_dirichlet, "bulk_dirichlet": bd.bulk_dirichlet,
                "phi_n": bd.total, "phi_proxy": bd.bulk_dirichlet + bulk_mass + ident["cell_energy"],
                "status": "ok",
            })
        for prev, row in zip(out, out[1:]):
            row["annulus_ratio"] = row["annulus_dirichlet"] / prev["annulus_dirichlet"] if prev[
                "annulus_dirichlet"] else None
            row["predicted_ratio"] = row["eps"] / prev["eps"] * 0.75 ** (row["p"] - 2.0)
        return out

    rows, times = _run_cells(plan, cells, work)
    report = ConvergenceReport("limsup", LIMSUP_COLUMNS, _complete(rows, LIMSUP_COLUMNS), _meta(plan, "limsup"),
                               times)
    for r in report.rows:
        if r["status"] == "ok" and r["identity_error"] > 1e-8:
            report.warnings.append(f"identity error {r['identity_error']:.3e} at p={r['p']} n={r['n']} {r['trace']}")
    return report


LIMINF_COLUMNS = ("p", "n", "eps", "source", "lhs", "rhs", "slack", "relative_slack", "status")


def run_liminf_suite(plan: ExperimentPlan) -> ConvergenceReport:
    """Both sides of the liminf inequality for the smooth catalog and for solved problems."""
    meshes = _meshes(plan)
    sources = [*plan.smooth, *(f"solved-{f}" for f in plan.solved)]
    cells = [{"p": p, "n": n, "source": s, "keys": {"p": p, "n": n, "source": s}}
             for p in plan.p for n in plan.levels for s in sources]

    def work(cell):
        p, n, src = cell["p"], cell["n"], cell["source"]
        mesh = meshes[n]
        if src.startswith("solved-"):
            res = solve_prehomogenized(n, mesh.geometry.eps, p, catalog.load(src[len("solved-"):]),
                                       config=SolveConfig(p=p), mesh=mesh, semantics=plan.semantics)
            v = res.u
        else:
            v = interpolate_nodal(catalog.SMOOTH[src], mesh)
        s = liminf_sides(v, p, plan.semantics)
        rel = s["slack"] / s["rhs"] if s["rhs"] > 0 else 0.0
        return [{"p": p, "n": n, "eps": float(mesh.eps), "source": src, "lhs": s["lhs"], "rhs": s["rhs"],
                 "slack": s["slack"], "relative_slack": rel, "status": "ok"}]

    rows, times = _run_cells(plan, cells, work)
    report = ConvergenceReport("liminf", LIMINF_COLUMNS, _complete(rows, LIMINF_COLUMNS), _meta(plan, "liminf"),
                               times)
    for r in report.rows:
        if r["status"] == "ok" and r["slack"] < -1e-10:
            report.warnings.append(f"negative slack {r['slack']:.3e} at p={r['p']} n={r['n']} {r['source']}")
    return report


CONVERGENCE_COLUMNS = ("p", "n", "eps", "value", "lp_mass", "bulk_dirichlet", "annulus_dirichlet", "fiber_weighted",
                       "l2_distance", "relative_residual", "backward_error", "vertices", "status")


def run_solution_convergence(plan: ExperimentPlan) -> ConvergenceReport:
    """Layered solutions for each level against the fractal proxy at the reference level."""
    f = catalog.load(plan.f)
    refs = {}
    ref_meta = {}
    for p in plan.p:
        if not plan.levels:
            break
        ref = solve_fractal(plan.reference_level, p, f, refine=plan.ref_refine, config=SolveConfig(p=p),
                            semantics=plan.semantics)
        refs[p] = ref
        ref_meta[repr(float(p))] = {"m": plan.reference_level, "refine": plan.ref_refine, "value": ref.value,
                                    "breakdown": ref.breakdown.as_dict(), "vertices": ref.u.mesh.n_vertices,
                                    "relative_residual": ref.meta["relative_residual"]}
    meshes = _meshes(plan)
    cells = [{"p": p, "n": n, "keys": {"p": p, "n": n}} for p in plan.p for n in plan.levels]

    def work(cell):
        p, n = cell["p"], cell["n"]
        mesh = meshes[n]
        res = solve_prehomogenized(n, mesh.geometry.eps, p, f, config=SolveConfig(p=p), mesh=mesh,
                                   semantics=plan.semantics)
        bd = res.breakdown
        return [{"p": p, "n": n, "eps": float(mesh.eps), "value": res.value, "lp_mass": bd.lp_mass,
                 "bulk_dirichlet": bd.bulk_dirichlet, "annulus_dirichlet": bd.annulus_dirichlet,
                 "fiber_weighted": bd.fiber_weighted, "l2_distance": l2_distance_omega_star(res.u, refs[p].u),
                 "relative_residual": res.meta["relative_residual"], "backward_error": res.meta["backward_error"],
                 "vertices": mesh.n_vertices, "status": "ok"}]

    rows, times = _run_cells(plan, cells, work)
    report = ConvergenceReport("convergence", CONVERGENCE_COLUMNS, _complete(rows, CONVERGENCE_COLUMNS),
                               _meta(plan, "convergence", reference=ref_meta), times)
    for p in plan.p:
        d = [r["l2_distance"] for r in report.rows if r["p"] == p and r["status"] == "ok"]
        if any(b > a for a, b in zip(d, d[1:])):
            msg = f"non-monotone L2 distances for p={p}: {d}"
            report.warnings.append(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return report


WEIGHT_COLUMNS = ("p", "n", "eps", "mode", "supremum", "balls", "skipped", "status")


def run_weight_diagnostic(plan: ExperimentPlan, mode: str = "restricted") -> ConvergenceReport:
    """Sampled A_p supremum of the fiber weight per level."""
    cells = [{"p": p, "n": n, "keys": {"p": p, "n": n}} for p in plan.p for n in plan.levels]

    def work(cell):
        p, n = cell["p"], cell["n"]
        geom = build_domain(n, plan.eps(n))
        rep = muckenhoupt_diagnostic(WeightField(geom, p), mode=mode, seed=plan.seed)
        return [{"p": p, "n": n, "eps": geom.eps_float, "mode": mode, "supremum": float(rep.supremum),
                 "balls": len(rep.rows), "skipped": rep.skipped, "status": "ok"}]

    rows, times = _run_cells(plan, cells, work)
    return ConvergenceReport("weights", WEIGHT_COLUMNS, _complete(rows, WEIGHT_COLUMNS), _meta(plan, "weights"),
                             times)


SUITES = {"limsup": run_limsup_suite, "liminf": run_liminf_suite, "convergence": run_solution_convergence,
          "weights": run_weight_diagnostic}


# ---------------------------------------------------------------------------
# emission


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def report_csv(report: ConvergenceReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(report.columns)
    for r in report.rows:
        w.writerow([_cell(r.get(c)) for c in report.columns])
    return buf.getvalue()


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def report_json(report: ConvergenceReport) -> str:
    return json.dumps(_clean(report.to_json()), indent=1, allow_nan=False) + "\n"


def _plot(report: ConvergenceReport, metric: str, path: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "kochlayer"}):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        keys = [c for c in ("trace", "source") if c in report.columns]
        groups: dict = {}
        for r in report.rows:
            if r.get("status") != "ok" or r.get(metric) is None:
                continue
            label = ", ".join([f"p={r['p']:g}"] + [str(r[k]) for k in keys])
            groups.setdefault(label, []).append((r["n"], r[metric]))
        for label, pts in groups.items():
            xs, ys = zip(*sorted(pts))
            ax.plot(xs, ys, marker="o", label=label)
        if groups and all(y > 0 for pts in groups.values() for _, y in pts):
            ax.set_yscale("log")
        ax.set_xlabel("n")
        ax.set_ylabel(metric)
        if groups:
            ax.legend(fontsize=6)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def emit(report: ConvergenceReport, out_dir, svg: bool = False) -> list[Path]:
    """Write CSV, JSON, a timing sidecar, optional SVG plots, and the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    base = report.suite
    (out / f"{base}.csv").write_text(report_csv(report), encoding="utf-8")
    (out / f"{base}.json").write_text(report_json(report), encoding="utf-8")
    written += [out / f"{base}.csv", out / f"{base}.json"]
    if svg:
        skip = {"p", "n", "status", "vertices", "balls", "skipped"}
        for c in report.columns:
            if c in skip or not any(isinstance(r.get(c), float) for r in report.rows):
                continue
            path = out / f"{base}_{c}.svg"
            _plot(report, c, path)
            written.append(path)
    timing = {"timestamp": datetime.now(timezone.utc).isoformat(), "runtime_s": report.runtimes}
    (out / f"{base}.timing.json").write_text(json.dumps(timing, indent=1) + "\n", encoding="utf-8")
    manifest = {
        "suite": report.suite,
        "config_hash": report.meta.get("config_hash"),
        "files": {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in written},
        "sidecar": f"{base}.timing.json",
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return written + [out / f"{base}.timing.json", out / "manifest.json"]


__all__ = [
    "ExperimentPlan",
    "PlanError",
    "parse_plan",
    "read_plan",
    "ConvergenceReport",
    "run_limsup_suite",
    "run_liminf_suite",
    "run_solution_convergence",
    "run_weight_diagnostic",
    "SUITES",
    "emit",
    "report_csv",
    "report_json",
    "LEVEL_CAP",
]
