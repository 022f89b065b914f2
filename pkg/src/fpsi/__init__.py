"""Finite-element solver for fluid / multilayered poroelastic structure interaction."""
from .cli import RunConfig, parse_config, run_experiment
from .forms import PhysicalParams, form_catalog, inlet_pressure, koiter_coeffs
from .mesh import BilayerMesh, build_mesh
from .solver import SystemState, TimeConfig, advance, compute_energy, run
from .verify import (
    convergence_in_space, convergence_in_time, elastic_wall_solve, mean_quantities, monolithic_solve,
    stability_sweep,
)

__all__ = [
    "BilayerMesh", "PhysicalParams", "RunConfig", "SystemState", "TimeConfig", "advance", "build_mesh",
    "compute_energy", "convergence_in_space", "convergence_in_time", "elastic_wall_solve", "form_catalog",
    "inlet_pressure", "koiter_coeffs", "mean_quantities", "monolithic_solve", "parse_config", "run",
    "run_experiment", "stability_sweep",
]
__version__ = "0.1.0"
