"""Deterministic CSV tables and legacy-ASCII VTK field dumps."""
from __future__ import annotations

import csv
import os
from typing import Iterable, Sequence

import numpy as np

from .forms import Spaces
from .mesh import BilayerMesh

ENERGY_HEADER = ("step", "time_s", "E_f", "E_p", "E_m", "visc_diss", "darcy_diss")
STATIONS_HEADER = ("time_s", "x_cm", "pf_mean", "pp_mean", "flowrate", "eta_y")
CONVERGENCE_HEADER = ("resolution", "variable", "norm", "abs_error", "rel_error", "rate")
SWEEP_HEADER = ("dx", "dt_critical", "slope_fit")


def format_value(value) -> str:
    """Locale-independent text of one cell: integers verbatim, floats as ``%.12e``."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if np.isnan(v):
            return "nan"
        if np.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.12e}"
    return str(value)


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence]) -> str:
    """Write a table with ``\\n`` line endings and fixed number formatting."""
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(v) for v in row])
    return path


def energy_rows(energies) -> list[tuple]:
    return [(e.step, e.t, e.E_f, e.E_p, e.E_m, e.visc_diss, e.darcy_diss) for e in energies]


def station_rows(series) -> list[tuple]:
    rows = []
    for k, t in enumerate(series.t):
        for i, x in enumerate(series.x):
            rows.append((t, x, series.pf_mean[k, i], series.pp_mean[k, i], series.flowrate[k, i],
                         series.eta_y[k, i]))
    return rows


def convergence_rows(report) -> list[tuple]:
    return [(r.resolution, r.variable, r.norm, r.abs_error, r.rel_error, r.rate) for r in report.rows]


def sweep_rows(result) -> list[tuple]:
    return [(ln.dx, ln.dt_critical if ln.dt_critical is not None else float("nan"), result.slope)
            for ln in result.lines]


def _vtk_header(mesh: BilayerMesh, title: str) -> list[str]:
    lines = ["# vtk DataFile Version 3.0", title[:255], "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {mesh.n_nodes} double"]
    lines += [f"{x:.12e} {y:.12e} 0.0" for x, y in mesh.nodes]
    nt = mesh.n_triangles
    lines.append(f"CELLS {nt} {4 * nt}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    lines.append(f"CELL_TYPES {nt}")
    lines += ["5"] * nt
    lines.append(f"CELL_DATA {nt}")
    lines.append("SCALARS region int 1")
    lines.append("LOOKUP_TABLE default")
    lines += [str(int(r)) for r in mesh.regions]
    return lines


def write_vtk(path: str, mesh: BilayerMesh, point_scalars: dict | None = None,
              point_vectors: dict | None = None, title: str = "bilayer mesh") -> str:
    """Legacy ASCII unstructured grid with optional nodal fields.

    Scalars have shape ``(n_nodes,)`` and vectors ``(n_nodes, 2)``.
    """
    lines = _vtk_header(mesh, title)
    if point_scalars or point_vectors:
        lines.append(f"POINT_DATA {mesh.n_nodes}")
        for name, vals in (point_scalars or {}).items():
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines += [f"{v:.12e}" for v in np.asarray(vals, dtype=float)]
        for name, vals in (point_vectors or {}).items():
            lines.append(f"VECTORS {name} double")
            lines += [f"{a:.12e} {b:.12e} 0.0" for a, b in np.asarray(vals, dtype=float)]
    with open(path, "w", newline="\n", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def nodal_fields(state, spaces: Spaces) -> tuple[dict, dict]:
    """Vertex values of every field on the full node set (zero outside the field's region)."""
    mesh = spaces.mesh
    n = mesh.n_nodes

    def scalar(space, vec, comp=0):
        out = np.zeros(n)
        out[space.vertices] = vec[comp * space.n_scalar + np.arange(len(space.vertices))]
        return out

    Vf, Qf, Vp, Qp = spaces.velocity, spaces.pressure, spaces.displacement, spaces.pore_pressure
    scalars = {"p_f": scalar(Qf, state.p_f), "p_p": scalar(Qp, state.p_p)}
    vectors = {
        "v": np.column_stack([scalar(Vf, state.v, 0), scalar(Vf, state.v, 1)]),
        "U": np.column_stack([scalar(Vp, state.U, 0), scalar(Vp, state.U, 1)]),
        "V": np.column_stack([scalar(Vp, state.V, 0), scalar(Vp, state.V, 1)]),
    }
    return scalars, vectors


def write_state_vtk(path: str, state, spaces: Spaces) -> str:
    scalars, vectors = nodal_fields(state, spaces)
    return write_vtk(path, spaces.mesh, scalars, vectors, title=f"step {state.n} t={state.t:.12e}")


def ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path
