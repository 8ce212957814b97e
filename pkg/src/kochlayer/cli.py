"""Command line: ``kochlayer {geom,mesh,solve,mosco,converge,diag}``.

Exit codes: 0 success, 1 invalid input, 2 numerical failure (a diagnostic JSON
is written to the output directory and its path printed).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import traceback
from dataclasses import fields, replace
from fractions import Fraction
from pathlib import Path

from . import catalog, harness
from . import io as kio
from .algebraic import as_amplitude
from .fem import NonFiniteValue
from .geometry import build_domain, eps_rule
from .mesh import MeshParams, mesh_fibered_domain, summary, validate, write_off
from .solver import SolveConfig, solve_fractal, solve_prehomogenized, verify_weak_form
from .weights import WeightField, muckenhoupt_diagnostic

OUT_ENV = "KOCHLAYER_OUT"
DEFAULT_OUT = "kochlayer-out"

log = logging.getLogger("kochlayer")


class NumericalFailure(RuntimeError):
    pass


def _eps(text: str):
    try:
        return as_amplitude(Fraction(text))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a rational number: {text!r}") from None


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=Path, default=None,
                        help=f"output directory (default: ${OUT_ENV} or ./{DEFAULT_OUT})")
    common.add_argument("--seed", type=int, default=None, help="seed for every random choice (default 0)")
    common.add_argument("--threads", type=int, default=None, help="worker threads (default 1)")
    common.add_argument("--svg", nargs="?", const=True, default=False, metavar="DIR",
                        help="also write SVG plots (optionally into DIR)")
    common.add_argument("-v", "--verbose", action="store_true")

    level = argparse.ArgumentParser(add_help=False)
    level.add_argument("--n", type=int, default=2, help="pre-fractal level (default 2)")
    level.add_argument("--eps", type=_eps, default=None,
                       help="fiber amplitude as a decimal or fraction (default eps0 * 2^-(n+1))")

    meshp = argparse.ArgumentParser(add_help=False)
    d = MeshParams()
    meshp.add_argument("--bulk-refine", type=int, default=d.bulk_refine, help=f"default {d.bulk_refine}")
    meshp.add_argument("--fiber-layers", type=int, default=d.fiber_layers, help=f"default {d.fiber_layers}")
    meshp.add_argument("--grading", type=float, default=d.grading, help=f"default {d.grading}")
    meshp.add_argument("--depth", type=int, default=d.depth, help=f"default {d.depth}")

    ap = argparse.ArgumentParser(prog="kochlayer", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("geom", parents=[common, level], help="build the fibered domain; JSON and SVG")
    sub.add_parser("mesh", parents=[common, level, meshp], help="mesh the domain; OFF + JSON sidecar")

    s = sub.add_parser("solve", parents=[common, level, meshp], help="solve the layered or fractal problem")
    s.add_argument("--p", type=float, default=2.0, help="exponent p >= 2 (default 2)")
    s.add_argument("--f", default="poly", choices=sorted(catalog.LOADS), help="load (default poly)")
    s.add_argument("--fractal", action="store_true", help="solve the fractal proxy on the level-n domain")
    s.add_argument("--refine", type=int, default=0, help="uniform refinements for --fractal (default 0)")
    s.add_argument("--tol", type=float, default=1e-10, help="relative residual tolerance (default 1e-10)")

    m = sub.add_parser("mosco", parents=[common], help="limsup or liminf suite from a plan file")
    m.add_argument("--suite", choices=("limsup", "liminf"), required=True)
    m.add_argument("--plan", type=Path, default=None, help="plan file (default: built-in plan)")

    c = sub.add_parser("converge", parents=[common], help="solution convergence against the fractal proxy")
    c.add_argument("--plan", type=Path, default=None, help="plan file (default: built-in plan)")

    g = sub.add_parser("diag", parents=[common, level], help="A_p diagnostic and mesh quality")
    g.add_argument("--p", type=float, default=2.0)
    g.add_argument("--mode", choices=("restricted", "one"), default="restricted")
    g.add_argument("--plan", type=Path, default=None, help="sweep the plan's levels instead of one level")
    return ap


def _out(args) -> Path:
    out = args.out or Path(os.environ.get(OUT_ENV, DEFAULT_OUT))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _svg_dir(args, out: Path) -> Path | None:
    if args.svg is False:
        return None
    return out if args.svg is True else Path(args.svg)


def _level_eps(args):
    if args.n < 0:
        raise ValueError("--n must be non-negative")
    return args.eps if args.eps is not None else eps_rule(args.n)


def _mesh_params(args) -> MeshParams:
    names = {f.name for f in fields(MeshParams)}
    return MeshParams(**{k: getattr(args, k) for k in names if hasattr(args, k)})


def _plan(args) -> harness.ExperimentPlan:
    plan = harness.read_plan(args.plan) if args.plan else harness.ExperimentPlan()
    over = {k: getattr(args, k) for k in ("seed", "threads") if getattr(args, k) is not None}
    return replace(plan, **over)


def cmd_geom(args) -> int:
    out = _out(args)
    geom = build_domain(args.n, _level_eps(args))
    path = kio.write_json(kio.geometry_to_json(geom), out / f"geom_n{args.n}.json")
    print(path)
    svg = _svg_dir(args, out)
    if svg is not None:
        print(kio.domain_svg(geom, svg / f"geom_n{args.n}.svg"))
    return 0


def cmd_mesh(args) -> int:
    out = _out(args)
    geom = build_domain(args.n, _level_eps(args))
    mesh = mesh_fibered_domain(geom, _mesh_params(args), threads=args.thread_count)
    rep = validate(mesh)
    if not rep.ok:
        raise NumericalFailure(f"mesh validation failed: {rep.kinds()}")
    off = out / f"mesh_n{args.n}.off"
    write_off(mesh, off)
    kio.write_json(summary(mesh), out / f"mesh_n{args.n}.summary.json")
    print(off)
    svg = _svg_dir(args, out)
    if svg is not None:
        print(kio.mesh_svg(mesh, svg / f"mesh_n{args.n}.svg"))
    return 0


def cmd_solve(args) -> int:
    out = _out(args)
    if args.p < 2.0:
        raise ValueError("--p must be at least 2")
    config = SolveConfig(p=args.p, tol=args.tol, threads=args.thread_count)
    f = catalog.load(args.f)
    if args.fractal:
        res = solve_fractal(args.n, args.p, f, refine=args.refine, config=config)
        name = f"solve_fractal_n{args.n}_p{args.p:g}_{args.f}"
    else:
        res = solve_prehomogenized(args.n, _level_eps(args), args.p, f, params=_mesh_params(args), config=config)
        name = f"solve_n{args.n}_p{args.p:g}_{args.f}"
    data = res.to_json()
    data["meta"] = {k: v for k, v in data["meta"].items() if k != "runtime_s"}
    data["weak_form"] = verify_weak_form(res, seed=args.seed_value)
    path = kio.write_json(data, out / f"{name}.json")
    kio.write_json({"runtime_s": res.meta["runtime_s"]}, out / f"{name}.timing.json")
    print(path)
    print(f"value {res.value!r}  residual {res.residual:.3e}  vertices {res.u.mesh.n_vertices}")
    svg = _svg_dir(args, out)
    if svg is not None:
        print(kio.solution_svg(res.u, svg / f"{name}.svg"))
    return 0


def _emit(report, args) -> int:
    out = _out(args)
    for p in harness.emit(report, out, svg=args.svg is not False):
        print(p)
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if report.failed:
        raise NumericalFailure(f"{len(report.failed)} report rows failed")
    return 0


def cmd_mosco(args) -> int:
    return _emit(harness.SUITES[args.suite](_plan(args)), args)


def cmd_converge(args) -> int:
    return _emit(harness.run_solution_convergence(_plan(args)), args)


def cmd_diag(args) -> int:
    if args.plan:
        return _emit(harness.run_weight_diagnostic(_plan(args), args.mode), args)
    out = _out(args)
    geom = build_domain(args.n, _level_eps(args))
    rep = muckenhoupt_diagnostic(WeightField(geom, args.p), mode=args.mode, seed=args.seed_value)
    mesh = mesh_fibered_domain(geom)
    val = validate(mesh)
    data = {"n": args.n, "eps": geom.eps_float, "p": args.p, "mode": args.mode, "supremum": float(rep.supremum),
            "balls": len(rep.rows), "skipped": rep.skipped, "mesh": summary(mesh), "mesh_ok": val.ok,
            "violations": sorted(val.kinds())}
    print(kio.write_json(data, out / f"diag_n{args.n}_p{args.p:g}.json"))
    print(f"A_p supremum {rep.supremum:.6g} over {len(rep.rows)} balls")
    return 0


COMMANDS = {"geom": cmd_geom, "mesh": cmd_mesh, "solve": cmd_solve, "mosco": cmd_mosco, "converge": cmd_converge,
            "diag": cmd_diag}

# raised on non-finite values, failed meshes, failed solves and quadrature; everything else in
# ValueError is an input problem
_NUMERICAL = (RuntimeError, NonFiniteValue, ArithmeticError)


def _diagnostic(args, exc: BaseException) -> Path:
    out = args.out or Path(os.environ.get(OUT_ENV, DEFAULT_OUT))
    data = {"command": args.command, "error": type(exc).__name__, "message": str(exc),
            "traceback": traceback.format_exception(type(exc), exc, exc.__traceback__)}
    trace = getattr(exc, "trace", None)
    if trace:
        data["trace"] = trace
    return kio.write_json(data, out / "diagnostic.json")


def main(argv=None) -> int:
    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage; usage errors are validation errors here
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    args.seed_value = 0 if args.seed is None else args.seed
    args.thread_count = 1 if args.threads is None else args.threads
    if args.thread_count < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args)
    except harness.PlanError as exc:
        print(f"error: plan field {exc.field}: {exc.message}", file=sys.stderr)
        return 1
    except _NUMERICAL as exc:
        path = _diagnostic(args, exc)
        print(f"numerical failure: {exc}\ndiagnostic: {path}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
