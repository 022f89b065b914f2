"""Reference solvers and experiment drivers.

``monolithic_solve`` advances the fully coupled problem with one implicit
linear system per step and serves as the oracle for the splitting error.
``elastic_wall_solve`` replaces the Biot layer by a purely elastic wall.
The remaining functions run convergence studies, stability sweeps and the
line averages used to compare flow regimes.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from . import solver as S
from .fem import Factorization, constrained_operator, evaluation_matrix, triangle_rule
from .forms import FormCatalog, PhysicalParams, convection_matrix, form_catalog, inlet_pressure
from .mesh import BilayerMesh, build_mesh


class SizeGuardError(ValueError):
    """Problem too large for a reference solver."""


# --------------------------------------------------------------------------
# Monolithic oracle
# --------------------------------------------------------------------------

def _interface_prolongation(forms: FormCatalog):
    """Map wall interface x-DOFs (P1 trace) to fluid interface x-DOFs (P2 trace).

    Returns the fluid DOF indices and the sparse map ``T`` with
    ``v_x|_Gamma = T @ U_x|_Gamma``.
    """
    lay = S.layout(forms)
    Vf = forms.spaces.velocity
    mesh = forms.spaces.mesh
    nodes = mesh.node_index(np.arange(mesh.nx + 1), np.full(mesh.nx + 1, mesh.ny_f))
    n_if = len(nodes)
    verts = Vf.vertex_dof(nodes)
    mids = np.array([Vf.edge_dof(a, b) for a, b in zip(nodes[:-1], nodes[1:])], dtype=np.int64)
    fluid = np.concatenate([verts, mids])
    rows = np.concatenate([np.arange(n_if), n_if + np.repeat(np.arange(n_if - 1), 2)])
    cols = np.concatenate([np.arange(n_if), np.column_stack([np.arange(n_if - 1), np.arange(1, n_if)]).ravel()])
    vals = np.concatenate([np.ones(n_if), np.full(2 * (n_if - 1), 0.5)])
    T = sp.csr_matrix((vals, (rows, cols)), shape=(len(fluid), n_if))
    return fluid, T, lay.interface[0]


@dataclass
class _MonoSystem:
    P: sp.csr_matrix          # trial basis (reduced -> full), tangential factor 1/dt
    Q: sp.csr_matrix          # test basis, tangential factor 1
    shift: sp.csr_matrix      # full-vector offset per unit U^n interface x (times -1/dt)
    fixed: np.ndarray         # reduced constrained DOFs
    n_full: int
    offsets: tuple


def _mono_bases(forms: FormCatalog, dt: float) -> _MonoSystem:
    lay = S.layout(forms)
    n_v, n_pf, n_U, n_pp = lay.n_v, lay.n_pf, lay.n_U, lay.n_pp
    n_full = n_v + n_pf + n_U + n_pp
    o_pf, o_U, o_pp = n_v, n_v + n_pf, n_v + n_pf + n_U
    fluid_if, T, wall_if = _interface_prolongation(forms)
    keep_v = np.setdiff1d(np.arange(n_v), fluid_if)
    red_full = np.concatenate([keep_v, np.arange(o_pf, n_full)])
    n_red = len(red_full)
    red_index = np.full(n_full, -1, dtype=np.int64)
    red_index[red_full] = np.arange(n_red)
    I = sp.csr_matrix((np.ones(n_red), (red_full, np.arange(n_red))), shape=(n_full, n_red))
    Tc = T.tocoo()
    link_rows = fluid_if[Tc.row]
    link_cols = red_index[o_U + wall_if[Tc.col]]
    link = sp.csr_matrix((Tc.data, (link_rows, link_cols)), shape=(n_full, n_red))
    P = (I + link / dt).tocsr()
    Q = (I + link).tocsr()
    shift_cols = wall_if[Tc.col]
    shift = sp.csr_matrix((Tc.data, (link_rows, shift_cols)), shape=(n_full, n_U))
    full_fixed = np.concatenate([lay.fluid_fixed, o_U + lay.wall_fixed])
    fixed = red_index[full_fixed]
    fixed = np.unique(fixed[fixed >= 0])
    return _MonoSystem(P=P, Q=Q, shift=shift.tocsr(), fixed=fixed, n_full=n_full, offsets=(o_pf, o_U, o_pp))


def _mono_operator(forms: FormCatalog, dt: float, wall_mass: sp.spmatrix, convection=None) -> sp.csr_matrix:
    inertia = wall_mass + forms.M_G
    stiff = forms.A_e + forms.A_m + forms.M_beta
    G = (forms.B_ep.T + forms.C_ep).tocsr()
    K_v = forms.M_f / dt + forms.A_f
    if convection is not None:
        K_v = K_v + convection
    B = forms.B_f
    Z = None
    blocks = [
        [K_v, -B.T, Z, forms.C_fp],
        [B, None, Z, Z],
        [Z, Z, 2.0 / dt ** 2 * inertia + 0.5 * stiff, -G],
        [-dt * forms.C_fp.T, Z, G.T, forms.S_p + dt * forms.A_p],
    ]
    n = [K_v.shape[0], B.shape[0], inertia.shape[0], forms.S_p.shape[0]]
    for i in range(4):
        for j in range(4):
            if blocks[i][j] is None:
                blocks[i][j] = sp.csr_matrix((n[i], n[j]))
    return sp.bmat(blocks, format="csr")


@dataclass
class MonolithicSolver:
    """Fully implicit reference stepper with the same spaces and boundary data.

    The fluid uses backward Euler and the wall the midpoint rule. The
    tangential fluid trace equals the wall velocity at the midpoint
    ``(U^{n+1} - U^n)/dt``, enforced by eliminating the fluid interface
    x-DOFs, and test functions satisfy the same constraint. Normal
    coupling goes through the pore pressure load and the interface flux,
    both implicit.
    """

    params: PhysicalParams
    forms: FormCatalog
    dt: float
    mode: str = "stokes"
    wall_mass: str = "lumped"

    def __post_init__(self):
        self._sys = _mono_bases(self.forms, self.dt)
        self._M = self.forms.M_p_lumped if self.wall_mass == "lumped" else self.forms.M_p
        self._fac = None

    def _factor(self, convection=None):
        sysm = self._sys
        A = _mono_operator(self.forms, self.dt, self._M, convection)
        K = (sysm.Q.T @ A @ sysm.P).tocsr()
        return A, Factorization(constrained_operator(K, sysm.fixed), label="monolithic step")

    def step(self, state: S.SystemState) -> S.SystemState:
        f, dt, sysm = self.forms, self.dt, self._sys
        lay = S.layout(f)
        if self.mode == "navier_stokes":
            A, fac = self._factor(convection_matrix(state.v, f.spaces, self.params.rho_f))
        else:
            if self._fac is None:
                self._fac = self._factor()
            A, fac = self._fac
        t_new = state.t + dt
        inertia = self._M + f.M_G
        stiff = f.A_e + f.A_m + f.M_beta
        G = f.B_ep.T + f.C_ep
        b_v = f.M_f @ state.v / dt + inlet_pressure(t_new, self.params) * f.inlet_load
        b_U = inertia @ (2.0 / dt ** 2 * state.U + 2.0 / dt * state.V) - 0.5 * (stiff @ state.U)
        if self.params.p_e:
            b_U = b_U + self.params.p_e * f.exterior_load
        b_p = f.S_p @ state.p_p + G.T @ state.U
        b = np.concatenate([b_v, np.zeros(lay.n_pf), b_U, b_p])
        z0 = -(sysm.shift @ state.U) / dt
        rhs = sysm.Q.T @ (b - A @ z0)
        rhs[sysm.fixed] = 0.0
        y = fac.solve(rhs, step=state.n + 1)
        z = sysm.P @ y + z0
        o_pf, o_U, o_pp = sysm.offsets
        U = z[o_U:o_pp]
        return replace(state, n=state.n + 1, t=(state.n + 1) * dt, v=z[:o_pf], p_f=z[o_pf:o_U],
                       U=U, V=2.0 / dt * (U - state.U) - state.V, p_p=z[o_pp:])


def monolithic_solve(params: PhysicalParams, mesh: BilayerMesh, dt: float, t_end: float,
                     mode: str = "stokes", wall_mass: str = "lumped", initial: S.SystemState | None = None,
                     forms: FormCatalog | None = None, max_dofs: int = 20000,
                     keep_states: bool | int = True) -> S.Trajectory:
    """Reference trajectory from the fully coupled implicit scheme.

    Raises
    ------
    SizeGuardError
        When the mesh carries more than ``max_dofs`` unknowns.
    """
    forms = form_catalog(params, mesh) if forms is None else forms
    lay = S.layout(forms)
    total = lay.n_v + lay.n_pf + lay.n_U + lay.n_pp
    if total > max_dofs:
        raise SizeGuardError(
            f"monolithic oracle refuses {total} DOFs (limit {max_dofs}); "
            "coarsen nx/ny_f/ny_p or raise max_dofs explicitly"
        )
    cfg = S.TimeConfig(dt=dt, t_end=t_end, mode=mode, cfl_enforcement="off", wall_mass=wall_mass)
    stepper = MonolithicSolver(params, forms, dt, mode, wall_mass)
    state = S.zero_state(forms) if initial is None else initial
    energies = [S.compute_energy(state, params, forms, wall_mass=wall_mass)]
    states = [state]
    stride = 1 if keep_states is True else (int(keep_states) if keep_states else 0)
    for _ in range(cfg.n_steps):
        state = stepper.step(state)
        energies.append(S.compute_energy(state, params, forms, wall_mass=wall_mass))
        if stride and state.n % stride == 0:
            states.append(state)
    if states[-1] is not state:
        states.append(state)
    return S.Trajectory(states=states, energies=energies)


# --------------------------------------------------------------------------
# Purely elastic wall
# --------------------------------------------------------------------------

class ElasticWallSolver:
    """Loosely coupled fluid / membrane / elastic-wall stepper.

    The wall carries no pore fluid, so the membrane is impermeable and the
    interface velocity is continuous in both components. Each step first
    advances the wall under the fluid interface pressure of the previous
    level (scaled by ``pressure_split``), then solves the fluid with a
    Robin condition carrying the membrane mass and the lumped wall mass of
    the interface nodes, minus the same pressure load. The wall velocity
    at the interface is finally replaced by the projection of the fluid
    trace. The wall solves ``rho_p U'' + beta U - div sigma^E = 0`` with
    the midpoint rule and the same clamping conditions.
    """

    def __init__(self, params: PhysicalParams, forms: FormCatalog, dt: float, mode: str = "stokes",
                 wall_mass: str = "lumped", pressure_split: float = 1.0):
        from .fem import TraceProduct, assemble_trace

        if not 0.0 <= pressure_split <= 1.0:
            raise S.ConfigurationError("pressure_split must lie in [0, 1]")
        self.params, self.forms, self.dt, self.mode = params, forms, dt, mode
        self.pressure_split = float(pressure_split)
        lay = S.layout(forms)
        self.lay = lay
        sp_ = forms.spaces
        Vf, Vp, Qf = sp_.velocity, sp_.displacement, sp_.pressure
        rm = params.membrane_inertia
        self.M = forms.M_p_lumped if wall_mass == "lumped" else forms.M_p
        n_if = lay.interface.shape[1]
        nodal = self.M.diagonal()[lay.interface[0]] if wall_mass == "lumped" else np.zeros(n_if)
        self.nodal2 = np.concatenate([nodal, nodal])
        self.fl_if = np.concatenate([lay.fluid_interface_x, Vf.n_scalar + lay.fluid_interface_x])
        self.M_mix = assemble_trace(Vf, Vp, [TraceProduct(0, 0, coef=rm), TraceProduct(1, 1, coef=rm)])
        # interface pressure loads on wall and fluid normal components
        self.P_wall = assemble_trace(Vp, Qf, TraceProduct(1, 0))
        self.P_fluid = assemble_trace(Vf, Qf, TraceProduct(1, 0))
        M_Gf = assemble_trace(Vf, Vf, [TraceProduct(0, 0, coef=rm), TraceProduct(1, 1, coef=rm)])
        P = sp.csr_matrix((np.ones(2 * n_if), (np.arange(2 * n_if), self.fl_if)), shape=(2 * n_if, lay.n_v))
        robin = M_Gf + P.T @ sp.diags(self.nodal2) @ P
        self._K = forms.M_f / dt + forms.A_f + robin / dt
        self._fluid = None if mode == "navier_stokes" else self._fluid_factor(None)
        wall_fixed = lay.wall_fixed[lay.wall_fixed < lay.n_U]
        self.wall_fixed = wall_fixed
        iface = lay.interface.ravel()
        keep = ~np.isin(iface, wall_fixed)
        self.free = iface[keep]
        self.free_fluid = self.fl_if[keep]
        self.free_nodal = self.nodal2[keep]
        G = forms.M_G[self.free][:, self.free] + sp.diags(self.free_nodal)
        self._proj = Factorization(G, label="interface projection")
        self.inertia = self.M + forms.M_G
        self.stiff = forms.A_e + forms.A_m + forms.M_beta
        self._wall = Factorization(constrained_operator(2.0 / dt ** 2 * self.inertia + 0.5 * self.stiff, wall_fixed),
                                   label="elastic wall step")

    def _fluid_factor(self, convection):
        K = self._K if convection is None else self._K + convection
        B = self.forms.B_f
        npf = B.shape[0]
        op = sp.bmat([[K, -B.T], [B, sp.csr_matrix((npf, npf))]], format="csr")
        return Factorization(constrained_operator(op, self.lay.fluid_fixed), label="fluid step")

    def step(self, state: S.SystemState) -> S.SystemState:
        f, dt, lay = self.forms, self.dt, self.lay
        b = self.pressure_split
        rhs_U = self.inertia @ (2.0 / dt ** 2 * state.U + 2.0 / dt * state.V) - 0.5 * (self.stiff @ state.U)
        rhs_U = rhs_U + b * (self.P_wall @ state.p_f)
        if self.params.p_e:
            rhs_U = rhs_U + self.params.p_e * f.exterior_load
        rhs_U[self.wall_fixed] = 0.0
        U = self._wall.solve(rhs_U, step=state.n + 1)
        V = 2.0 / dt * (U - state.U) - state.V
        fac = self._fluid if self._fluid is not None else self._fluid_factor(
            convection_matrix(state.v, f.spaces, self.params.rho_f))
        robin = self.M_mix @ V
        np.add.at(robin, self.fl_if, self.nodal2 * V[lay.interface.ravel()])
        rhs_v = (f.M_f @ state.v / dt + robin / dt - b * (self.P_fluid @ state.p_f)
                 + inlet_pressure(state.t + dt, self.params) * f.inlet_load)
        rhs = np.concatenate([rhs_v, np.zeros(lay.n_pf)])
        rhs[lay.fluid_fixed] = 0.0
        x = fac.solve(rhs, step=state.n + 1)
        v, p_f = x[:lay.n_v], x[lay.n_v:]
        V[self.free] = self._proj.solve((self.M_mix.T @ v)[self.free] + self.free_nodal * v[self.free_fluid])
        return replace(state, n=state.n + 1, t=(state.n + 1) * dt, v=v, p_f=p_f, U=U, V=V,
                       p_p=np.zeros_like(state.p_p))


def elastic_wall_solve(params: PhysicalParams, mesh: BilayerMesh, dt: float, t_end: float,
                       mode: str = "stokes", wall_mass: str = "lumped", forms: FormCatalog | None = None,
                       keep_states: bool | int = True, blowup_threshold: float = 1e250,
                       pressure_split: float = 1.0) -> S.Trajectory:
    """Trajectory of the fluid / membrane / elastic-wall model.

    ``kappa``, ``s0`` and ``alpha`` are ignored; ``p_p`` stays zero. See
    :class:`ElasticWallSolver` for ``pressure_split``.
    """
    forms = form_catalog(params, mesh) if forms is None else forms
    stepper = ElasticWallSolver(params, forms, dt, mode, wall_mass, pressure_split)
    return _drive(stepper.step, params, forms, S.TimeConfig(dt=dt, t_end=t_end, mode=mode, cfl_enforcement="off",
                                                           wall_mass=wall_mass),
                  keep_states, blowup_threshold)


def _drive(step, params, forms, config, keep_states, blowup_threshold, initial=None) -> S.Trajectory:
    state = S.zero_state(forms) if initial is None else initial
    energies = [S.compute_energy(state, params, forms, config.coupling, config.wall_mass)]
    states = [state]
    stride = 1 if keep_states is True else (int(keep_states) if keep_states else 0)
    for _ in range(config.n_steps):
        with np.errstate(over="ignore", invalid="ignore"):
            state = step(state)
            rec = S.compute_energy(state, params, forms, config.coupling, config.wall_mass)
        energies.append(rec)
        if not state.is_finite() or not np.isfinite(rec.total) or rec.total > blowup_threshold:
            states.append(state)
            return S.Trajectory(states=states, energies=energies, blew_up=True, blowup_step=state.n)
        if stride and state.n % stride == 0:
            states.append(state)
    if states[-1] is not state:
        states.append(state)
    return S.Trajectory(states=states, energies=energies)


# --------------------------------------------------------------------------
# Error norms
# --------------------------------------------------------------------------

VARIABLES = ("v", "p_f", "V", "p_p", "U")
NORMS = ("linf_L2", "l2_H1", "l2_L2", "linf_H1")

#: Norms reported per variable, following the published convergence tables.
DEFAULT_NORMS = {
    "v": ("linf_L2", "l2_H1"),
    "p_f": ("l2_L2",),
    "V": ("linf_L2",),
    "p_p": ("linf_L2", "l2_H1"),
    "U": ("linf_H1",),
}


def _space_of(forms: FormCatalog, var: str):
    sp_ = forms.spaces
    return {"v": sp_.velocity, "p_f": sp_.pressure, "V": sp_.displacement,
            "p_p": sp_.pore_pressure, "U": sp_.displacement}[var]


class SpaceSampler:
    """Quadrature evaluation of discrete fields on one space's cells.

    ``L2`` and ``H1`` give squared norms of the difference between a field
    of the sampler's own space and a field of another space (possibly on a
    finer mesh), evaluated at the sampler's quadrature points. For the same
    space this is the exact discrete norm up to quadrature exactness.
    """

    def __init__(self, space, order: int = 5):
        mesh = space.mesh
        pts, wts = triangle_rule(order)
        tri = space.triangles
        p = mesh.nodes[mesh.triangles[tri]]
        det = np.abs((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                     - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
        xq = (p[:, 0, None, :] + pts[None, :, 0, None] * (p[:, 1, None, :] - p[:, 0, None, :])
              + pts[None, :, 1, None] * (p[:, 2, None, :] - p[:, 0, None, :]))
        # pull quadrature points slightly inward so point location is unambiguous
        centroid = p.mean(axis=1)
        xq = centroid[:, None, :] + (1 - 1e-10) * (xq - centroid[:, None, :])
        self.space = space
        self.points = xq.reshape(-1, 2)
        self.weights = (det[:, None] * wts[None, :]).ravel()
        self._cache: dict = {}

    def _ops(self, space):
        key = id(space)
        if key not in self._cache:
            ops = []
            for c in range(space.ncomp):
                ops.append((evaluation_matrix(space, self.points, c),
                            evaluation_matrix(space, self.points, c, 0),
                            evaluation_matrix(space, self.points, c, 1)))
            self._cache[key] = (space, ops)
        return self._cache[key][1]

    def squared(self, own: np.ndarray, other_space=None, other: np.ndarray | None = None) -> tuple[float, float]:
        """Squared ``(L2, H1-seminorm)`` of ``own - other`` (``other`` optional)."""
        l2 = 0.0
        semi = 0.0
        mine = self._ops(self.space)
        theirs = self._ops(other_space) if other is not None else None
        w = self.weights
        for c, (E, Dx, Dy) in enumerate(mine):
            d0, dx, dy = E @ own, Dx @ own, Dy @ own
            if theirs is not None:
                F, Fx, Fy = theirs[c]
                d0, dx, dy = d0 - F @ other, dx - Fx @ other, dy - Fy @ other
            l2 += float(w @ (d0 * d0))
            semi += float(w @ (dx * dx + dy * dy))
        return l2, semi


def _field(state: S.SystemState, var: str) -> np.ndarray:
    return getattr(state, var)


class _Accumulator:
    """Running time-discrete norms of one variable."""

    def __init__(self):
        self.linf_L2 = self.linf_H1 = 0.0
        self.l2_L2 = self.l2_H1 = 0.0

    def add(self, l2: float, semi: float, dt: float):
        h1 = l2 + semi
        self.linf_L2 = max(self.linf_L2, l2)
        self.linf_H1 = max(self.linf_H1, h1)
        self.l2_L2 += dt * l2
        self.l2_H1 += dt * h1

    def value(self, norm: str) -> float:
        return float(np.sqrt(getattr(self, norm)))


@dataclass
class ConvergenceRow:
    resolution: float
    variable: str
    norm: str
    abs_error: float
    rel_error: float
    rate: float | None
    blew_up: bool = False


@dataclass
class ConvergenceReport:
    """Errors against a reference run with observed rates.

    ``rate`` of a row is ``ln(e_prev / e) / ln(r_prev / r)`` against the
    previous (coarser) resolution of the same variable and norm.
    """

    kind: str
    reference: float
    rows: list = field(default_factory=list)

    def series(self, variable: str, norm: str) -> list[ConvergenceRow]:
        return [r for r in self.rows if r.variable == variable and r.norm == norm]

    def fitted_rate(self, variable: str, norm: str, last: int | None = None) -> float:
        """Least-squares slope of ``ln e`` against ``ln r`` over non-blown rows."""
        rows = [r for r in self.series(variable, norm) if not r.blew_up and r.abs_error > 0]
        if last is not None:
            rows = sorted(rows, key=lambda r: r.resolution)[:last]
        if len(rows) < 2:
            return float("nan")
        x = np.log([r.resolution for r in rows])
        y = np.log([r.abs_error for r in rows])
        return float(np.polyfit(x, y, 1)[0])

    def monotone_fraction(self) -> float:
        """Fraction of consecutive rows whose error decreases toward the reference."""
        good = total = 0
        for var in VARIABLES:
            for norm in NORMS:
                rows = sorted((r for r in self.series(var, norm) if not r.blew_up),
                              key=lambda r: -r.resolution)
                for a, b in zip(rows[:-1], rows[1:]):
                    total += 1
                    good += b.abs_error < a.abs_error
        return good / total if total else float("nan")


def _finish_report(kind, reference, results, ref_norms, norms_by_var) -> ConvergenceReport:
    """Assemble rows sorted from coarse to fine and attach rates."""
    report = ConvergenceReport(kind=kind, reference=reference)
    ordered = sorted(results, key=lambda r: -r[0])
    for var, norms in norms_by_var.items():
        for norm in norms:
            prev = None
            for res, acc, blew in ordered:
                e = acc[var].value(norm) if not blew else float("nan")
                ref = ref_norms[var].value(norm)
                rate = None
                if prev is not None and not blew and prev[1] > 0 and e > 0:
                    rate = float(np.log(prev[1] / e) / np.log(prev[0] / res))
                report.rows.append(ConvergenceRow(res, var, norm, e, e / ref if ref > 0 else float("nan"),
                                                  rate, blew))
                if not blew:
                    prev = (res, e)
    return report


@dataclass
class _Run:
    """A stepper advancing one trajectory inside a lockstep study."""

    step: Callable
    state: S.SystemState
    stride: int
    forms: FormCatalog
    params: PhysicalParams
    blew_up: bool = False


def _split_stepper(params, forms, config):
    def step(state):
        return S.advance(state, params, forms, config)
    return step


def _check_run(run: _Run, threshold: float) -> None:
    if not run.state.is_finite():
        run.blew_up = True
        return
    e = S.compute_energy(run.state, run.params, run.forms).total
    if not np.isfinite(e) or e > threshold:
        run.blew_up = True


def convergence_in_time(params: PhysicalParams, mesh: BilayerMesh, dt_list: Sequence[float], dt_ref: float,
                        t_end: float, mode: str = "stokes", norms: dict | None = None,
                        blowup_threshold: float = 1e250, forms: FormCatalog | None = None,
                        scheme_options: dict | None = None) -> ConvergenceReport:
    """Temporal errors of split runs against a fine-step reference on one mesh.

    Every ``dt`` must be an integer multiple of ``dt_ref`` and divide
    ``t_end``. Runs advance in lockstep with the reference, so no
    trajectories are stored; errors are sampled at each coarse time level.
    """
    dt_list = sorted(float(d) for d in dt_list)
    if not dt_ref < dt_list[0] / 2 * (1 + 1e-12):
        raise S.ConfigurationError("dt_ref must be below half the smallest dt")
    norms = DEFAULT_NORMS if norms is None else norms
    forms = form_catalog(params, mesh) if forms is None else forms
    opts = dict(scheme_options or {})
    mk = lambda dt: S.TimeConfig(dt=dt, t_end=t_end, mode=mode, cfl_enforcement="off", **opts)
    ref_cfg = mk(dt_ref)
    n_ref = ref_cfg.n_steps
    runs = []
    for dt in dt_list:
        ratio = dt / dt_ref
        if abs(ratio - round(ratio)) > 1e-9 * ratio:
            raise S.ConfigurationError(f"dt = {dt} is not an integer multiple of dt_ref = {dt_ref}")
        cfg = mk(dt)
        cfg.n_steps  # validates t_end
        runs.append(_Run(_split_stepper(params, forms, cfg), S.zero_state(forms), int(round(ratio)), forms, params))
    sampler = {var: SpaceSampler(_space_of(forms, var)) for var in norms}
    accs = [{var: _Accumulator() for var in norms} for _ in runs]
    ref_acc = {var: _Accumulator() for var in norms}
    ref = _Run(_split_stepper(params, forms, ref_cfg), S.zero_state(forms), 1, forms, params)
    for k in range(1, n_ref + 1):
        ref.state = ref.step(ref.state)
        for run, acc, dt in zip(runs, accs, dt_list):
            if k % run.stride or run.blew_up:
                continue
            with np.errstate(over="ignore", invalid="ignore"):
                run.state = run.step(run.state)
                _check_run(run, blowup_threshold)
            if run.blew_up:
                continue
            for var in norms:
                diff = _field(run.state, var) - _field(ref.state, var)
                acc[var].add(*sampler[var].squared(diff), dt)
        if k % runs[0].stride == 0:
            for var in norms:
                ref_acc[var].add(*sampler[var].squared(_field(ref.state, var)), dt_list[0])
    results = [(dt, acc, run.blew_up) for dt, acc, run in zip(dt_list, accs, runs)]
    return _finish_report("time", dt_ref, results, ref_acc, norms)


def mesh_for_dx(dx: float, L: float = 6.0, R: float = 0.5, r_p: float = 0.1, aspect: float = 1.0) -> BilayerMesh:
    """Mesh with vertical spacing ``dx`` in both layers and axial spacing ``aspect * dx``."""
    if not dx > 0 or not aspect > 0:
        raise ValueError("dx and aspect must be positive")
    ny_p = max(1, int(round(r_p / dx)))
    ny_f = max(1, int(round(R / dx)))
    nx = max(1, int(round(L / (aspect * dx))))
    return build_mesh(L, R, r_p, nx, ny_f, ny_p)


def convergence_in_space(params: PhysicalParams, dt: float, dx_list: Sequence[float], dx_ref: float,
                         t_end: float, mode: str = "stokes", aspect: float = 1.0, L: float = 6.0,
                         R: float = 0.5, r_p: float = 0.1, norms: dict | None = None,
                         blowup_threshold: float = 1e250, scheme_options: dict | None = None) -> ConvergenceReport:
    """Spatial errors of split runs against a fine-mesh reference at a common ``dt``.

    The reference field is evaluated at the quadrature points of each
    coarse mesh, so errors are exact for the reference's discrete field.
    """
    dx_list = sorted((float(d) for d in dx_list), reverse=True)
    if not dx_ref < min(dx_list):
        raise S.ConfigurationError("dx_ref must be finer than every tested dx")
    norms = DEFAULT_NORMS if norms is None else norms
    opts = dict(scheme_options or {})
    cfg = S.TimeConfig(dt=dt, t_end=t_end, mode=mode, cfl_enforcement="off", **opts)
    n = cfg.n_steps

    def make(dx):
        mesh = mesh_for_dx(dx, L, R, r_p, aspect)
        f = form_catalog(params, mesh)
        return _Run(_split_stepper(params, f, cfg), S.zero_state(f), 1, f, params)

    ref = make(dx_ref)
    runs = [make(dx) for dx in dx_list]
    samplers = [{var: SpaceSampler(_space_of(r.forms, var)) for var in norms} for r in runs]
    ref_sampler = {var: SpaceSampler(_space_of(ref.forms, var)) for var in norms}
    accs = [{var: _Accumulator() for var in norms} for _ in runs]
    ref_acc = {var: _Accumulator() for var in norms}
    for _ in range(n):
        ref.state = ref.step(ref.state)
        for var in norms:
            ref_acc[var].add(*ref_sampler[var].squared(_field(ref.state, var)), dt)
        for run, smp, acc in zip(runs, samplers, accs):
            if run.blew_up:
                continue
            with np.errstate(over="ignore", invalid="ignore"):
                run.state = run.step(run.state)
                _check_run(run, blowup_threshold)
            if run.blew_up:
                continue
            for var in norms:
                acc[var].add(*smp[var].squared(_field(run.state, var), _space_of(ref.forms, var),
                                               _field(ref.state, var)), dt)
    results = [(dx, acc, run.blew_up) for dx, acc, run in zip(dx_list, accs, runs)]
    return _finish_report("space", dx_ref, results, ref_acc, norms)


# --------------------------------------------------------------------------
# Stability sweep
# --------------------------------------------------------------------------

@dataclass
class SweepPoint:
    dt: float
    energy: float
    blew_up: bool


@dataclass
class SweepLine:
    """Sweep of one mesh size: probed steps, bracket and critical step."""

    dx: float
    points: list
    dt_critical: float | None
    bracket: tuple | None
    monotone: bool
    note: str = ""


@dataclass
class StabilitySweepResult:
    """Critical time steps per mesh size and their linear fit.

    ``slope`` is the proportionality constant of the fit through the
    origin; ``slope_affine``, ``intercept`` and ``r2`` describe the
    ordinary least-squares line.
    """

    lines: list
    slope: float
    slope_affine: float
    intercept: float
    r2: float

    @property
    def critical(self) -> dict:
        return {ln.dx: ln.dt_critical for ln in self.lines}


def _energy_probe(params, forms, t_end, n_steps, mode, threshold, scheme_options):
    cfg = S.TimeConfig(dt=t_end / n_steps, t_end=t_end, mode=mode, cfl_enforcement="off", **scheme_options)
    tr = S.run(params, forms, cfg, keep_states=False, blowup_threshold=threshold)
    peak = max(e.total for e in tr.energies)
    final = tr.energies[-1].total
    return (final if np.isfinite(final) else float("inf")), peak, tr.blew_up


def stability_sweep(params: PhysicalParams, dx_list: Sequence[float], dt_grid, blowup_threshold: float = 1e250,
                    t_end: float = 6e-3, growth_factor: float = 1e3, n_bisect: int = 8, mode: str = "stokes",
                    aspect: float = 1.0, L: float = 6.0, R: float = 0.5, r_p: float = 0.1,
                    scheme_options: dict | None = None, mesh_factory: Callable | None = None) -> StabilitySweepResult:
    """Bisected critical time step for each mesh size and the linear fit.

    A run counts as unstable when its energy passes ``blowup_threshold``
    (or a DOF turns non-finite), or when its peak energy exceeds
    ``growth_factor`` times the peak energy of the smallest probed step.
    The second test catches growth that is exponential but too slow to
    reach the absolute threshold within ``t_end``.

    Parameters
    ----------
    dt_grid : sequence of float, or mapping from dx to a sequence
        Ascending trial steps. Each is rounded so that it divides ``t_end``.
    """
    opts = dict(scheme_options or {})
    factory = mesh_factory or (lambda dx: mesh_for_dx(dx, L, R, r_p, aspect))
    lines = []
    for dx in dx_list:
        grid = dt_grid[dx] if isinstance(dt_grid, dict) else dt_grid
        grid = [float(d) for d in grid]
        if any(b <= a for a, b in zip(grid[:-1], grid[1:])):
            raise S.ConfigurationError("dt_grid must be strictly ascending")
        forms = form_catalog(params, factory(dx))
        counts = sorted({max(1, int(round(t_end / d))) for d in grid}, reverse=True)
        probes: dict[int, tuple] = {}

        def probe(n):
            if n not in probes:
                probes[n] = _energy_probe(params, forms, t_end, n, mode, blowup_threshold, opts)
            return probes[n]

        base = probe(counts[0])[1]

        def unstable(n):
            final, peak, blew = probe(n)
            return blew or not np.isfinite(peak) or peak > growth_factor * base

        flags = [unstable(n) for n in counts]
        monotone = all(not a or b for a, b in zip(flags[:-1], flags[1:]))
        note = "" if monotone else "instability is not monotone in dt on the grid"
        first_bad = next((i for i, f in enumerate(flags) if f), None)
        if first_bad is None or first_bad == 0:
            bracket = None
            crit = None
            note = "threshold outside grid" + (f"; {note}" if note else "")
        else:
            n_lo, n_hi = counts[first_bad - 1], counts[first_bad]  # stable (more steps), unstable (fewer steps)
            for _ in range(n_bisect):
                if n_lo - n_hi <= 1:
                    break
                mid = int(round(np.sqrt(n_lo * n_hi)))
                mid = min(max(mid, n_hi + 1), n_lo - 1)
                if unstable(mid):
                    n_hi = mid
                else:
                    n_lo = mid
            bracket = (t_end / n_lo, t_end / n_hi)
            crit = float(np.sqrt(bracket[0] * bracket[1]))
        points = [SweepPoint(t_end / n, probes[n][0], unstable(n)) for n in sorted(probes, reverse=True)]
        lines.append(SweepLine(dx=float(dx), points=points, dt_critical=crit, bracket=bracket,
                               monotone=monotone, note=note))
    good = [ln for ln in lines if ln.dt_critical is not None]
    x = np.array([ln.dx for ln in good])
    y = np.array([ln.dt_critical for ln in good])
    if len(good) >= 2:
        slope = float(x @ y / (x @ x))
        a, b = np.polyfit(x, y, 1)
        resid = y - (a * x + b)
        ss = float(((y - y.mean()) ** 2).sum())
        r2 = float(1 - (resid @ resid) / ss) if ss > 0 else 1.0
    else:
        slope = float(y[0] / x[0]) if len(good) == 1 else float("nan")
        a, b, r2 = float("nan"), float("nan"), float("nan")
    return StabilitySweepResult(lines=lines, slope=slope, slope_affine=float(a), intercept=float(b), r2=r2)


# --------------------------------------------------------------------------
# Line averages
# --------------------------------------------------------------------------

@dataclass
class StationSeries:
    """Per-station time series; arrays have shape (n_times, n_stations)."""

    t: np.ndarray
    x: np.ndarray
    pf_mean: np.ndarray
    pp_mean: np.ndarray
    flowrate: np.ndarray
    eta_y: np.ndarray


def _line_rule(levels: np.ndarray, n_gauss: int = 3):
    g, w = np.polynomial.legendre.leggauss(n_gauss)
    a, b = levels[:-1], levels[1:]
    y = (0.5 * (a + b)[:, None] + 0.5 * (b - a)[:, None] * g[None, :]).ravel()
    wy = (0.5 * (b - a)[:, None] * w[None, :]).ravel()
    return y, wy


class StationOperators:
    """Sparse linear functionals for the line averages at given stations."""

    def __init__(self, forms: FormCatalog, stations: Sequence[float]):
        mesh = forms.spaces.mesh
        xs = np.asarray(stations, dtype=float)
        idx = np.clip(np.round(np.interp(xs, mesh.x_levels, np.arange(mesh.nx + 1))).astype(int), 1, mesh.nx - 1)
        snapped = mesh.x_levels[idx]
        off = np.abs(snapped - xs) > 1e-9 * mesh.L
        if np.any(off):
            warnings.warn(f"{int(off.sum())} station(s) moved to the nearest vertical mesh line", UserWarning,
                          stacklevel=2)
        self.x = snapped
        yf, wf = _line_rule(mesh.y_levels[: mesh.ny_f + 1])
        yp, wp = _line_rule(mesh.y_levels[mesh.ny_f:])
        sp_ = forms.spaces
        rows_f, rows_p = [], []
        for x in snapped:
            rows_f.append((np.column_stack([np.full_like(yf, x), yf]), wf))
            rows_p.append((np.column_stack([np.full_like(yp, x), yp]), wp))

        def functional(space, rows, comp, scale):
            mats = [sp.csr_matrix(w[None, :]) @ evaluation_matrix(space, pts, comp) * scale for pts, w in rows]
            return sp.vstack(mats).tocsr()

        self.pf = functional(sp_.pressure, rows_f, 0, 1.0 / mesh.R)
        self.pp = functional(sp_.pore_pressure, rows_p, 0, 1.0 / mesh.r_p)
        self.Q = functional(sp_.velocity, rows_f, 0, 1.0)
        iface = np.column_stack([snapped, np.full_like(snapped, mesh.R)])
        self.eta = evaluation_matrix(sp_.displacement, iface, 1)

    def evaluate(self, state: S.SystemState) -> tuple:
        return self.pf @ state.p_f, self.pp @ state.p_p, self.Q @ state.v, self.eta @ state.U


def mean_quantities(states: Sequence[S.SystemState], forms: FormCatalog,
                    stations: Sequence[float] | None = None) -> StationSeries:
    """Line averages on vertical mesh lines for each stored state.

    ``pf_mean`` and ``pp_mean`` are the mean pressures over the fluid and
    wall segments of the line, ``flowrate`` is ``int v_x dy`` over the
    fluid segment and ``eta_y`` the radial membrane displacement.
    Stations default to every interior vertical mesh line.
    """
    mesh = forms.spaces.mesh
    if stations is None:
        stations = mesh.x_levels[1:-1]
    ops = StationOperators(forms, stations)
    vals = [ops.evaluate(s) for s in states]
    arr = [np.array([v[k] for v in vals]) for k in range(4)]
    return StationSeries(t=np.array([s.t for s in states]), x=ops.x, pf_mean=arr[0], pp_mean=arr[1],
                         flowrate=arr[2], eta_y=arr[3])


def peak_summary(series: StationSeries, arrival_x: float = 3.0) -> dict:
    """Peak radial displacement and mean pore pressure over all stations and times,
    and the time at which the mean fluid pressure peaks at the station nearest ``arrival_x``.
    """
    if series.t.size == 0:
        raise ValueError("empty station series")
    k = int(np.argmin(np.abs(series.x - arrival_x)))
    return {
        "peak_eta_y": float(np.max(np.abs(series.eta_y))),
        "peak_pp_mean": float(np.max(np.abs(series.pp_mean))),
        "pf_peak_time": float(series.t[int(np.argmax(series.pf_mean[:, k]))]),
        "arrival_x": float(series.x[k]),
    }
