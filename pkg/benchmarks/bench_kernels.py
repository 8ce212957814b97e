"""Time the numpy and compiled element kernels on a real fibered mesh.

    python benchmarks/bench_kernels.py --n 3 --p 3 --repeat 5
"""

from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from kochlayer import kernels
from kochlayer.fractal_energy import cell_graph
from kochlayer.geometry import build_domain, eps_rule
from kochlayer.mesh import mesh_fibered_domain
from kochlayer.quadrature import triangle_rule


def cases(n: int, p: float):
    mesh = mesh_fibered_domain(build_domain(n, eps_rule(n)))
    rng = np.random.default_rng(0)
    xy, tris = mesh.points, mesh.triangles
    u = rng.standard_normal(len(xy))
    g, area = kernels.element_gradients(xy, tris)
    coef = rng.uniform(0.5, 2.0, len(tris))
    bary, qw = triangle_rule(int(np.ceil(p)) + 2)
    pairs = cell_graph(n, "all-pairs-unordered", "set").pairs()
    pw = np.ones(len(pairs))
    s = rng.uniform(0.1, 1.0, (len(tris), 3))
    return len(tris), {
        "element_gradients": lambda: kernels.element_gradients(xy, tris),
        "p_dirichlet": lambda: kernels.p_dirichlet(g, tris, coef, u, p, 1e-8, True),
        "p_mass": lambda: kernels.p_mass(tris, np.abs(area), bary, qw, u, p, 1e-8, True),
        "pair_p": lambda: kernels.pair_p(pairs, pw, u[: pairs.max() + 1], p, 1e-8, True),
        "inv_x_integral": lambda: kernels.inv_x_integral(s, np.abs(area)),
    }


def _flat(out):
    parts = out if isinstance(out, tuple) else (out,)
    return np.concatenate([np.ravel(a) for a in parts if a is not None])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=3)
    ap.add_argument("--p", type=float, default=3.0)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", action="store_true", help="print a JSON record instead of a table")
    args = ap.parse_args(argv)

    before = kernels.BACKEND
    try:
        kernels.use_backend("cython")
    except ImportError:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`", file=sys.stderr)
        return 1
    n_el, fns = cases(args.n, args.p)
    rows = []
    for name, fn in fns.items():
        timing = {}
        result = {}
        for backend in ("numpy", "cython"):
            kernels.use_backend(backend)
            result[backend] = _flat(fn())
            timing[backend] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
        a, b = result["numpy"], result["cython"]
        dev = float(np.max(np.abs(a - b)) / max(float(np.max(np.abs(a))), 1e-300))
        rows.append({"kernel": name, "numpy_s": timing["numpy"], "cython_s": timing["cython"],
                     "speedup": timing["numpy"] / timing["cython"], "max_rel_dev": dev})
    kernels.use_backend(before)

    if args.json:
        print(json.dumps({"n": args.n, "p": args.p, "elements": n_el, "rows": rows}, indent=1))
        return 0
    print(f"n={args.n} p={args.p:g} elements={n_el}")
    print(f"{'kernel':<18}{'numpy [ms]':>12}{'cython [ms]':>13}{'speedup':>9}{'max dev':>11}")
    for r in rows:
        print(f"{r['kernel']:<18}{1e3 * r['numpy_s']:>12.2f}{1e3 * r['cython_s']:>13.2f}"
              f"{r['speedup']:>9.1f}{r['max_rel_dev']:>11.1e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
