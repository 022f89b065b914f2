"""Command-line entry point: configuration parsing and experiment runners.

Configuration files hold one ``key = value`` pair per line; ``#`` starts a
comment. Lists are comma separated. Every key is a :class:`RunConfig`
field name and unknown keys are rejected.

Exit codes: 0 success, 2 configuration error, 3 solver failure,
4 blow-up (outside stability sweeps).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import io, solver, verify
from .fem import SolverError
from .forms import ParameterError, PhysicalParams, form_catalog
from .mesh import MeshError, build_mesh

EXPERIMENTS = ("run", "convergence-time", "convergence-space", "stability-sweep", "compare-elastic",
               "compare-regimes")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_BLOWUP = 0, 2, 3, 4

_PARAM_KEYS = tuple(f.name for f in dataclasses.fields(PhysicalParams) if f.name not in ("g", "h_force", "s"))
_TIME_KEYS = ("dt", "t_end", "mode", "cfl_enforcement", "coupling", "order", "cfl_constant", "wall_mass")


class ConfigError(ValueError):
    """Invalid configuration; carries the offending key and line number when known."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        self.key = key
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key {key!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


@dataclass
class RunConfig:
    """Everything needed to run one experiment; defaults reproduce the benchmark setup."""

    experiment: str = "run"
    output_dir: str = "output"
    # geometry
    L: float = 6.0
    R: float = 0.5
    r_p: float = 0.1
    nx: int = 375
    ny_f: int = 31
    ny_p: int = 7
    # time stepping
    dt: float = 5e-6
    t_end: float = 6e-3
    mode: str = "stokes"
    cfl_enforcement: str = "warn"
    coupling: str = "kinematic"
    order: str = "fluid_first"
    cfl_constant: float = 1.0
    wall_mass: str = "lumped"
    # output
    dump_every: int = 0
    stations: tuple = (1.0, 2.0, 3.0, 4.0, 5.0)
    station_every: int = 1
    workers: int = 1
    # convergence studies
    dt_list: tuple = (4e-5, 2e-5, 1e-5, 5e-6)
    dt_ref: float = 0.0
    dx_list: tuple = ()
    dx_ref: float = 0.0
    aspect: float = 1.0
    # stability sweep
    sweep_dx_list: tuple = ()
    sweep_dt_grid: tuple = (1e-5, 2e-5, 4e-5, 8e-5, 1.6e-4, 3.2e-4, 6.4e-4)
    blowup_threshold: float = 1e250
    growth_factor: float = 1e3
    n_bisect: int = 8
    # regime comparison
    high_s0: float = 2e-5
    high_kappa: float = 1e-4
    arrival_station: float = 3.0
    params: PhysicalParams = field(default_factory=PhysicalParams)

    def time_config(self, **changes) -> solver.TimeConfig:
        kw = {k: getattr(self, k) for k in _TIME_KEYS}
        kw.update(changes)
        return solver.TimeConfig(**kw)

    def mesh(self):
        return build_mesh(self.L, self.R, self.r_p, self.nx, self.ny_f, self.ny_p)

    @property
    def resolved_dx_list(self) -> tuple:
        return self.dx_list or tuple(self.r_p / k for k in (4, 5, 6, 7))

    @property
    def resolved_dx_ref(self) -> float:
        return self.dx_ref or self.r_p / 10

    @property
    def resolved_dt_ref(self) -> float:
        return self.dt_ref or min(self.dt_list) / 4

    @property
    def resolved_sweep_dx_list(self) -> tuple:
        return self.sweep_dx_list or tuple(self.r_p / k for k in (2, 3, 4, 5))


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig) if f.name != "params"}
_INT_KEYS = {"nx", "ny_f", "ny_p", "dump_every", "station_every", "workers", "n_bisect"}
_STR_KEYS = {"experiment", "output_dir", "mode", "cfl_enforcement", "coupling", "order", "wall_mass"}
_LIST_KEYS = {"stations", "dt_list", "dx_list", "sweep_dx_list", "sweep_dt_grid"}


def _convert(key: str, text: str, line: int | None):
    text = text.strip()
    try:
        if key in _STR_KEYS:
            if not text:
                raise ValueError("empty value")
            return text
        if key in _LIST_KEYS:
            return tuple(float(t) for t in text.split(",") if t.strip())
        if key in _INT_KEYS:
            val = float(text)
            if val != int(val):
                raise ValueError("expected an integer")
            return int(val)
        return float(text)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {text!r}: {exc}", key, line) from None


def _known(key: str) -> bool:
    return key in _FIELD_TYPES or key in _PARAM_KEYS


def build_config(values: dict[str, tuple[str, int | None]]) -> RunConfig:
    """Validated configuration from raw ``key -> (text, line)`` pairs."""
    top, phys = {}, {}
    for key, (text, line) in values.items():
        if not _known(key):
            raise ConfigError("unknown key", key, line)
        val = _convert(key, text, line)
        (phys if key in _PARAM_KEYS else top)[key] = (val, line)
    try:
        params = PhysicalParams(**{k: v for k, (v, _) in phys.items()})
    except ParameterError as exc:
        raise ConfigError(str(exc).split(": ", 1)[-1], exc.key, phys.get(exc.key, (None, None))[1]) from None
    cfg = RunConfig(params=params, **{k: v for k, (v, _) in top.items()})
    line_of = {k: ln for k, (_, ln) in top.items()}
    if cfg.experiment not in EXPERIMENTS:
        raise ConfigError(f"must be one of {EXPERIMENTS}", "experiment", line_of.get("experiment"))
    for key in ("L", "R", "r_p", "nx", "ny_f", "ny_p"):
        if not getattr(cfg, key) > 0:
            raise ConfigError("must be positive", key, line_of.get(key))
    for key in ("dump_every",):
        if getattr(cfg, key) < 0:
            raise ConfigError("must be non-negative", key, line_of.get(key))
    for key in ("station_every", "workers", "n_bisect"):
        if getattr(cfg, key) < 1:
            raise ConfigError("must be at least 1", key, line_of.get(key))
    for key in ("dt_list", "sweep_dt_grid"):
        vals = getattr(cfg, key)
        if not vals or any(v <= 0 for v in vals):
            raise ConfigError("needs positive entries", key, line_of.get(key))
    for key in ("aspect", "growth_factor", "blowup_threshold", "high_s0", "high_kappa"):
        if not getattr(cfg, key) > 0:
            raise ConfigError("must be positive", key, line_of.get(key))
    if any(x <= 0 or x >= cfg.L for x in cfg.stations):
        raise ConfigError("stations must lie strictly inside (0, L)", "stations", line_of.get("stations"))
    try:
        cfg.time_config().n_steps
    except solver.ConfigurationError as exc:
        msg = str(exc)
        key = next((k for k in _TIME_KEYS if msg.startswith(k)), None)
        raise ConfigError(msg, key, line_of.get(key)) from None
    return cfg


def read_config_text(text: str) -> dict[str, tuple[str, int]]:
    values: dict[str, tuple[str, int]] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", None, n)
        key, val = (t.strip() for t in line.split("=", 1))
        if not key:
            raise ConfigError("missing key", None, n)
        if key in values:
            raise ConfigError("duplicate key", key, n)
        values[key] = (val, n)
    return values


def parse_config(path: str | None, overrides: Sequence[str] = ()) -> RunConfig:
    """Parse a configuration file (``None`` for defaults) plus ``key=value`` overrides.

    Raises
    ------
    ConfigError
        Missing file, malformed line, unknown key or invalid value.
    """
    values: dict[str, tuple[str, int | None]] = {}
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            values.update(read_config_text(fh.read()))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, val = (t.strip() for t in item.split("=", 1))
        values[key] = (val, None)
    return build_config(values)


# --------------------------------------------------------------------------
# Experiments
# --------------------------------------------------------------------------

class _Failure(Exception):
    def __init__(self, code: int, record: dict):
        self.code = code
        self.record = record
        super().__init__(record.get("message", ""))


def _write_failure(out: str, record: dict) -> None:
    with open(os.path.join(out, "failure.json"), "w", newline="\n", encoding="ascii") as fh:
        json.dump(record, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _simulate(cfg: RunConfig, params: PhysicalParams, out: str, model: str = "biot"):
    """One trajectory with energy, station and optional VTK output. Returns the station series."""
    mesh = cfg.mesh()
    forms = form_catalog(params, mesh, workers=cfg.workers)
    ops = verify.StationOperators(forms, cfg.stations)
    times, rows = [], []
    dumps = []

    def record(state):
        if state.n % cfg.station_every == 0:
            times.append(state.t)
            rows.append(ops.evaluate(state))
        if cfg.dump_every and state.n % cfg.dump_every == 0:
            dumps.append(io.write_state_vtk(os.path.join(out, f"fields_{state.n:06d}.vtk"), state, forms.spaces))

    tc = cfg.time_config()
    record(solver.zero_state(forms))
    if model == "elastic":
        stepper = verify.ElasticWallSolver(params, forms, tc.dt, tc.mode, tc.wall_mass)

        def step(state):
            new = stepper.step(state)
            record(new)
            return new

        traj = verify._drive(step, params, forms, tc, False, cfg.blowup_threshold)
    else:
        traj = solver.run(params, forms, tc, keep_states=False, blowup_threshold=cfg.blowup_threshold,
                          callback=record)
    io.write_csv(os.path.join(out, "energy.csv"), io.ENERGY_HEADER, io.energy_rows(traj.energies))
    arr = [np.array([r[k] for r in rows]) for k in range(4)]
    series = verify.StationSeries(t=np.array(times), x=ops.x, pf_mean=arr[0], pp_mean=arr[1],
                                  flowrate=arr[2], eta_y=arr[3])
    io.write_csv(os.path.join(out, "stations.csv"), io.STATIONS_HEADER, io.station_rows(series))
    if traj.blew_up:
        raise _Failure(EXIT_BLOWUP, {"status": "blow-up", "step": traj.blowup_step,
                                     "energy": io.format_value(traj.energies[-1].total), "model": model,
                                     "message": f"energy exceeded {cfg.blowup_threshold:.3e} or became non-finite"})
    return series


def _summary(cfg: RunConfig, out: str, cases: dict) -> None:
    rows = []
    for name, series in cases.items():
        s = verify.peak_summary(series, cfg.arrival_station)
        rows.append((name, s["peak_eta_y"], s["peak_pp_mean"], s["pf_peak_time"]))
    io.write_csv(os.path.join(out, "summary.csv"), ("case", "peak_eta_y", "peak_pp_mean", "pf_peak_time_s"), rows)


def _exp_run(cfg, out):
    _simulate(cfg, cfg.params, out)


def _exp_convergence_time(cfg, out):
    mesh = cfg.mesh()
    forms = form_catalog(cfg.params, mesh, workers=cfg.workers)
    opts = dict(coupling=cfg.coupling, order=cfg.order, wall_mass=cfg.wall_mass)
    rep = verify.convergence_in_time(cfg.params, mesh, cfg.dt_list, cfg.resolved_dt_ref, cfg.t_end, cfg.mode,
                                     blowup_threshold=cfg.blowup_threshold, forms=forms, scheme_options=opts)
    io.write_csv(os.path.join(out, "convergence.csv"), io.CONVERGENCE_HEADER, io.convergence_rows(rep))


def _exp_convergence_space(cfg, out):
    opts = dict(coupling=cfg.coupling, order=cfg.order, wall_mass=cfg.wall_mass)
    rep = verify.convergence_in_space(cfg.params, cfg.dt, cfg.resolved_dx_list, cfg.resolved_dx_ref, cfg.t_end,
                                      cfg.mode, aspect=cfg.aspect, L=cfg.L, R=cfg.R, r_p=cfg.r_p,
                                      blowup_threshold=cfg.blowup_threshold, scheme_options=opts)
    io.write_csv(os.path.join(out, "convergence.csv"), io.CONVERGENCE_HEADER, io.convergence_rows(rep))


def _exp_stability_sweep(cfg, out):
    opts = dict(coupling=cfg.coupling, order=cfg.order, wall_mass=cfg.wall_mass)
    res = verify.stability_sweep(cfg.params, cfg.resolved_sweep_dx_list, cfg.sweep_dt_grid,
                                 blowup_threshold=cfg.blowup_threshold, t_end=cfg.t_end,
                                 growth_factor=cfg.growth_factor, n_bisect=cfg.n_bisect, mode=cfg.mode,
                                 aspect=cfg.aspect, L=cfg.L, R=cfg.R, r_p=cfg.r_p, scheme_options=opts)
    io.write_csv(os.path.join(out, "sweep.csv"), io.SWEEP_HEADER, io.sweep_rows(res))
    probes = [(ln.dx, p.dt, p.energy, p.blew_up) for ln in res.lines for p in ln.points]
    io.write_csv(os.path.join(out, "sweep_probes.csv"), ("dx", "dt", "energy", "unstable"), probes)


def _exp_compare_elastic(cfg, out):
    cases = {}
    for name, model in (("poroelastic", "biot"), ("elastic", "elastic")):
        sub = io.ensure_dir(os.path.join(out, name))
        cases[name] = _simulate(cfg, cfg.params, sub, model)
    _summary(cfg, out, cases)


def _exp_compare_regimes(cfg, out):
    variants = {
        "baseline": cfg.params,
        "high_s0": cfg.params.replace(s0=cfg.high_s0),
        "high_kappa": cfg.params.replace(kappa=cfg.high_kappa),
    }
    cases = {}
    for name, params in variants.items():
        sub = io.ensure_dir(os.path.join(out, name))
        cases[name] = _simulate(cfg, params, sub)
    _summary(cfg, out, cases)


_RUNNERS = {
    "run": _exp_run,
    "convergence-time": _exp_convergence_time,
    "convergence-space": _exp_convergence_space,
    "stability-sweep": _exp_stability_sweep,
    "compare-elastic": _exp_compare_elastic,
    "compare-regimes": _exp_compare_regimes,
}


def run_experiment(cfg: RunConfig) -> int:
    """Run the configured experiment into ``cfg.output_dir`` and return the exit status."""
    try:
        out = io.ensure_dir(cfg.output_dir)
    except OSError as exc:
        print(f"error: cannot create output directory {cfg.output_dir}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    try:
        _RUNNERS[cfg.experiment](cfg, out)
    except _Failure as exc:
        _write_failure(out, exc.record)
        print(f"error: {exc.record['status']}: {exc}", file=sys.stderr)
        return exc.code
    except (solver.ConfigurationError, MeshError, ParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        _write_failure(out, {"status": "solver-failure", "step": exc.step, "label": exc.label,
                             "message": str(exc)})
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"error: {exc.filename or out}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="fpsi", description="Fluid / membrane / poroelastic wall experiments.")
    parser.add_argument("experiment", nargs="?", choices=EXPERIMENTS,
                        help="experiment to run (overrides the config's 'experiment' key)")
    parser.add_argument("-c", "--config", help="key = value configuration file")
    parser.add_argument("-o", "--output", help="output directory (overrides 'output_dir')")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key; repeatable")
    args = parser.parse_args(argv)
    overrides = list(args.overrides)
    if args.experiment:
        overrides.append(f"experiment={args.experiment}")
    if args.output:
        overrides.append(f"output_dir={args.output}")
    try:
        cfg = parse_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run_experiment(cfg)


if __name__ == "__main__":
    sys.exit(main())
