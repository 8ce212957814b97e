"""Named loads and test functions used by the harness and the command line."""

from __future__ import annotations

import numpy as np

from .fractal_energy import TraceValues, cell_graph, decimate_extend, fill_apexes


def _zero(x, y):
    return 0.0 * x


def _one(x, y):
    return 1.0 + 0.0 * x


def _poly(x, y):
    return 1.0 + x - 2.0 * y + x * y


LOADS = {"zero": _zero, "one": _one, "poly": _poly}

SMOOTH = {
    "x": lambda x, y: x,
    "y": lambda x, y: y,
    "xy": lambda x, y: x * y,
    "x2-y2": lambda x, y: x * x - y * y,
    "cubic": lambda x, y: x**3 - 3.0 * x * y * y + 0.5 * y,
    "bowl": lambda x, y: (x - 0.4) ** 2 + 2.0 * (y - 0.2) ** 2,
}

HOLDER = {
    "holder-a": lambda x, y: np.abs(x - 0.3) ** 0.6 + np.sqrt(np.abs(y + 0.1)),
    "holder-b": lambda x, y: (x * x + (y - 0.3) ** 2) ** 0.35,
}

# boundary data on the three vertices of the level-0 triangle
DECIMATION = {"dec-010": (0.0, 1.0, 0.0), "dec-mixed": (1.0, -1.0, 0.5)}

CONSTANT = {"const": 2.0}


def load(name: str):
    try:
        return LOADS[name]
    except KeyError:
        raise KeyError(f"unknown load {name!r}; choose from {sorted(LOADS)}") from None


def trace_names() -> list[str]:
    return [*DECIMATION, *HOLDER, *CONSTANT, *SMOOTH]


def trace(name: str, n: int, p: float, semantics: str = "set"):
    """A callable or a level-``n`` ``TraceValues`` for the named test trace."""
    if name in DECIMATION:
        data = np.array(DECIMATION[name])
        if n == 0:
            return fill_apexes(cell_graph(0, "all-pairs-unordered", semantics), data, p)
        return decimate_extend((data, 0), n, p, semantics=semantics)
    if name in HOLDER:
        return HOLDER[name]
    if name in SMOOTH:
        return SMOOTH[name]
    if name in CONSTANT:
        c = CONSTANT[name]
        return lambda x, y: c + 0.0 * x
    raise KeyError(f"unknown trace {name!r}; choose from {trace_names()}")


def is_trace_values(obj) -> bool:
    return isinstance(obj, TraceValues)
