"""Serialization of geometries, solve results and plots."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .algebraic import HALF, ONE, AlgebraicNumber
from .geometry import DomainGeometry, build_domain


class MalformedInput(ValueError):
    pass


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def dumps(obj) -> str:
    """Deterministic JSON; floats keep their shortest round-trip repr."""
    return json.dumps(_clean(obj), indent=1, allow_nan=False) + "\n"


def write_json(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj), encoding="utf-8")
    return path


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedInput(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def geometry_to_json(geom: DomainGeometry) -> dict:
    return geom.to_json()


def geometry_from_json(data: dict) -> DomainGeometry:
    """Rebuild a domain from its JSON and check that every stored exact coordinate agrees."""
    try:
        level = int(data["level"])
        eps = AlgebraicNumber.from_json(data["eps"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedInput(f"geometry JSON: missing or bad field ({exc})") from None
    geom = build_domain(level, eps)
    if geom.to_json() != data:
        raise MalformedInput("geometry JSON: stored coordinates differ from the rebuilt domain")
    return geom


def domain_svg(geom: DomainGeometry, path) -> Path:
    """Pre-fractal polygon with inner and outer collar bands."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Polygon

    from .geometry import _trapezoid

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context({"svg.hashsalt": "kochlayer"}):
        fig, ax = plt.subplots(figsize=(6, 6))
        verts = np.array([[float(a), float(b)] for a, b in geom.curve.exact_vertices()])
        ax.add_patch(Polygon(verts, closed=True, facecolor="#dde6f0", edgecolor="k", lw=0.4))
        for c in geom.collars:
            outer = np.array([[float(a), float(b)] for a, b in _trapezoid(c, geom.eps, ONE)])
            inner = np.array([[float(a), float(b)] for a, b in _trapezoid(c, geom.eps, HALF)])
            ax.add_patch(Polygon(outer, closed=True, facecolor="#f4d9a6", edgecolor="none", alpha=0.7))
            ax.add_patch(Polygon(inner, closed=True, facecolor="#c9562c", edgecolor="none", alpha=0.8))
        ax.set_xlim(-0.6, 1.6)
        ax.set_ylim(-1.0, 1.1)
        ax.set_aspect("equal")
        ax.axis("off")
        ax.set_title(f"n={geom.level}, eps={geom.eps_float:.4g}")
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path


def mesh_svg(mesh, path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context({"svg.hashsalt": "kochlayer"}):
        fig, ax = plt.subplots(figsize=(6, 6))
        ax.tripcolor(mesh.points[:, 0], mesh.points[:, 1], mesh.triangles, facecolors=mesh.region.astype(float),
                     cmap="Pastel1", edgecolors="k", linewidth=0.05)
        ax.set_aspect("equal")
        ax.axis("off")
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path


def solution_svg(u, path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    m = u.mesh
    with matplotlib.rc_context({"svg.hashsalt": "kochlayer"}):
        fig, ax = plt.subplots(figsize=(6, 5))
        tp = ax.tripcolor(m.points[:, 0], m.points[:, 1], m.triangles, u.values, shading="gouraud")
        fig.colorbar(tp, ax=ax)
        ax.set_aspect("equal")
        ax.axis("off")
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path


__all__ = [
    "MalformedInput",
    "dumps",
    "write_json",
    "read_json",
    "geometry_to_json",
    "geometry_from_json",
    "domain_svg",
    "mesh_svg",
    "solution_svg",
]
