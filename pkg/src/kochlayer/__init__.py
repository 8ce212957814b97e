"""Fibered Koch-type domains, weighted p-energies and their fractal limit."""

from .fem import DiscreteFunctional, EnergyBreakdown, FemFunction, l2_distance_omega_star
from .fractal_energy import cell_graph, decimate_extend, discrete_energy
from .geometry import EPS0, build_domain, eps_rule
from .harness import ExperimentPlan, run_liminf_suite, run_limsup_suite, run_solution_convergence
from .mesh import MeshParams, mesh_fibered_domain, mesh_prefractal
from .operators import fiber_identity, liminf_sides, recovery_sequence
from .solver import SolveConfig, solve_fractal, solve_prehomogenized

__version__ = "0.1.0"

__all__ = [
    "EPS0",
    "build_domain",
    "eps_rule",
    "MeshParams",
    "mesh_fibered_domain",
    "mesh_prefractal",
    "FemFunction",
    "DiscreteFunctional",
    "EnergyBreakdown",
    "l2_distance_omega_star",
    "cell_graph",
    "decimate_extend",
    "discrete_energy",
    "recovery_sequence",
    "fiber_identity",
    "liminf_sides",
    "SolveConfig",
    "solve_prehomogenized",
    "solve_fractal",
    "ExperimentPlan",
    "run_limsup_suite",
    "run_liminf_suite",
    "run_solution_convergence",
]
