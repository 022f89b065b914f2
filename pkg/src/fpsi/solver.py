"""Loosely coupled time stepping of the fluid / membrane / Biot system.

Each time step runs a fluid solve with a Robin condition carrying the
membrane inertia, followed by a Biot solve with the membrane elastodynamics
as a Robin condition, integrated by the midpoint Newmark rule.

Two treatments of the tangential interface velocity are provided:

``"kinematic"`` (default)
    The tangential membrane velocity is the single state variable shared by
    both sub-steps. The fluid step starts from the membrane velocity of the
    previous step, and the Biot step starts from the tangential fluid trace
    just computed (its L2 projection onto the wall trace space). This is
    the Lie splitting of the no-slip problem, so the scheme converges to
    the monolithic solution.
``"decoupled"``
    The fluid step uses its own previous tangential trace and the Biot step
    its own previous velocity, so no tangential information crosses the
    interface. This is the energy-stable but wall-slip variant.
"""
from __future__ import annotations

import warnings
import weakref
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .fem import Factorization, SolverError, Source, assemble_vector, constrained_operator
from .forms import FormCatalog, PhysicalParams, convection_matrix, inlet_pressure

MODES = ("stokes", "navier_stokes")
CFL_POLICIES = ("off", "warn", "reject")
COUPLINGS = ("kinematic", "decoupled")
WALL_MASSES = ("lumped", "consistent")
ORDERS = ("fluid_first", "biot_first")


class ConfigurationError(ValueError):
    """Invalid time-stepping configuration."""


class CFLWarning(UserWarning):
    """Time step exceeds the computable stability bound."""


@dataclass(frozen=True)
class TimeConfig:
    """Time-stepping controls.

    Attributes
    ----------
    dt, t_end : float
        Step size and final time in seconds. ``t_end`` must be an integer
        multiple of ``dt`` (relative tolerance 1e-9).
    mode : {"stokes", "navier_stokes"}
        Navier-Stokes mode adds the convective term linearized about the
        previous velocity.
    cfl_enforcement : {"off", "warn", "reject"}
    coupling : {"kinematic", "decoupled"}
        Tangential interface treatment, see the module docstring.
    order : {"fluid_first", "biot_first"}
        Order of the two sub-steps.
    cfl_constant : float
        Product of the analysis constants dividing ``2 mu_f s0 h`` in the bound.
    wall_mass : {"lumped", "consistent"}
        Wall inertia matrix. The lumped mass makes the kinematic scheme
        energy stable; see :func:`project_tangential_trace`.
    """

    dt: float
    t_end: float
    mode: str = "stokes"
    cfl_enforcement: str = "warn"
    coupling: str = "kinematic"
    order: str = "fluid_first"
    cfl_constant: float = 1.0
    wall_mass: str = "lumped"

    def __post_init__(self):
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise ConfigurationError(f"dt must be positive, got {self.dt}")
        if not self.t_end >= self.dt * (1 - 1e-12):
            raise ConfigurationError(f"t_end ({self.t_end}) must be at least dt ({self.dt})")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.cfl_enforcement not in CFL_POLICIES:
            raise ConfigurationError(f"cfl_enforcement must be one of {CFL_POLICIES}")
        if self.coupling not in COUPLINGS:
            raise ConfigurationError(f"coupling must be one of {COUPLINGS}")
        if self.wall_mass not in WALL_MASSES:
            raise ConfigurationError(f"wall_mass must be one of {WALL_MASSES}")
        if self.order not in ORDERS:
            raise ConfigurationError(f"order must be one of {ORDERS}")
        if not self.cfl_constant > 0:
            raise ConfigurationError("cfl_constant must be positive")

    @property
    def n_steps(self) -> int:
        n = self.t_end / self.dt
        k = int(round(n))
        if abs(n - k) > 1e-9 * max(1.0, n):
            raise ConfigurationError(
                f"t_end = {self.t_end} is not an integer multiple of dt = {self.dt}; "
                "choose t_end = k * dt"
            )
        return k


@dataclass
class SystemState:
    """Snapshot of all unknowns at one time level.

    The membrane displacement and velocity are views of the interface
    values of ``U`` and ``V``; they are never stored separately.
    """

    n: int
    t: float
    v: np.ndarray
    p_f: np.ndarray
    U: np.ndarray
    V: np.ndarray
    p_p: np.ndarray
    interface_dofs: np.ndarray = field(repr=False)

    @property
    def eta(self) -> np.ndarray:
        """Membrane displacement, shape (2, n_interface)."""
        return self.U[self.interface_dofs]

    @property
    def xi(self) -> np.ndarray:
        """Membrane velocity, shape (2, n_interface)."""
        return self.V[self.interface_dofs]

    def copy(self) -> "SystemState":
        return replace(self, v=self.v.copy(), p_f=self.p_f.copy(), U=self.U.copy(),
                       V=self.V.copy(), p_p=self.p_p.copy())

    def vector(self) -> np.ndarray:
        return np.concatenate([self.v, self.p_f, self.U, self.V, self.p_p])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.vector())))


@dataclass(frozen=True)
class EnergyRecord:
    """Discrete energies and dissipation rates at one time level."""

    step: int
    t: float
    E_f: float
    E_p: float
    E_m: float
    visc_diss: float
    darcy_diss: float

    @property
    def total(self) -> float:
        return self.E_f + self.E_p + self.E_m


# --------------------------------------------------------------------------
# Boundary data and per-catalog caches
# --------------------------------------------------------------------------

@dataclass
class _Layout:
    fluid_fixed: np.ndarray
    wall_fixed: np.ndarray
    n_v: int
    n_pf: int
    n_U: int
    n_pp: int
    interface: np.ndarray          # (2, n_iface) wall DOFs of the interface nodes, ordered by x
    fluid_interface_x: np.ndarray  # fluid x-velocity DOFs of the same nodes
    free_x: np.ndarray             # positions (into the interface arrays) that are not clamped


@dataclass
class _Scheme:
    """Matrices that depend on the interface treatment and the wall mass choice."""

    wall_mass: sp.csr_matrix
    robin: sp.csr_matrix           # fluid-step tangential interface inertia
    nodal_mass: np.ndarray         # wall mass carried by the fluid Robin term, per interface node
    projector: Optional[Factorization]


_LAYOUTS: "weakref.WeakKeyDictionary[FormCatalog, _Layout]" = weakref.WeakKeyDictionary()
_CACHE: "weakref.WeakKeyDictionary[FormCatalog, dict]" = weakref.WeakKeyDictionary()


def layout(forms: FormCatalog) -> _Layout:
    """Constrained DOF sets and interface bookkeeping for a catalog (cached)."""
    lay = _LAYOUTS.get(forms)
    if lay is not None:
        return lay
    sp_ = forms.spaces
    mesh = sp_.mesh
    Vf, Qf, Vp, Qp = sp_.velocity, sp_.pressure, sp_.displacement, sp_.pore_pressure
    corners = Vf.vertex_dof(mesh.node_index(np.array([0, mesh.nx]), np.array([mesh.ny_f, mesh.ny_f])))
    fluid_fixed = np.unique(np.concatenate([Vf.dofs("axis", comp=1), corners, Vf.n_scalar + corners]))
    off_p = Vp.ndofs
    wall_fixed = np.unique(np.concatenate([
        Vp.dofs("inlet_p"), Vp.dofs("outlet_p"), Vp.dofs("exterior", comp=0),
        off_p + Qp.dofs("inlet_p"), off_p + Qp.dofs("outlet_p"), off_p + Qp.dofs("exterior"),
    ]))
    iface_nodes = mesh.node_index(np.arange(mesh.nx + 1), np.full(mesh.nx + 1, mesh.ny_f))
    iface_scalar = Vp.vertex_dof(iface_nodes)
    interface = np.stack([iface_scalar, Vp.n_scalar + iface_scalar])
    lay = _Layout(
        fluid_fixed=fluid_fixed, wall_fixed=wall_fixed,
        n_v=Vf.ndofs, n_pf=Qf.ndofs, n_U=Vp.ndofs, n_pp=Qp.ndofs,
        interface=interface, fluid_interface_x=Vf.vertex_dof(iface_nodes),
        free_x=np.flatnonzero(~np.isin(interface[0], wall_fixed)),
    )
    _LAYOUTS[forms] = lay
    return lay


def _cached(forms: FormCatalog, key, build):
    cache = _CACHE.setdefault(forms, {})
    if key not in cache:
        cache[key] = build()
    return cache[key]


def scheme(forms: FormCatalog, coupling: str = "kinematic", wall_mass: str = "lumped") -> _Scheme:
    """Interface inertia operators of one scheme variant (cached per catalog)."""
    if coupling not in COUPLINGS:
        raise ConfigurationError(f"coupling must be one of {COUPLINGS}")
    if wall_mass not in WALL_MASSES:
        raise ConfigurationError(f"wall_mass must be one of {WALL_MASSES}")

    def build():
        lay = layout(forms)
        M = forms.M_p_lumped if wall_mass == "lumped" else forms.M_p
        n_if = lay.interface.shape[1]
        if coupling == "decoupled":
            return _Scheme(wall_mass=M, robin=forms.M_Gtau, nodal_mass=np.zeros(n_if), projector=None)
        nodal = M.diagonal()[lay.interface[0]] if wall_mass == "lumped" else np.zeros(n_if)
        P = sp.csr_matrix((np.ones(n_if), (np.arange(n_if), lay.fluid_interface_x)), shape=(n_if, lay.n_v))
        robin = (forms.M_Gtau + P.T @ sp.diags(nodal) @ P).tocsr()
        ix = lay.interface[0][lay.free_x]
        G = forms.M_G[ix][:, ix] + sp.diags(nodal[lay.free_x])
        return _Scheme(wall_mass=M, robin=robin, nodal_mass=nodal,
                       projector=Factorization(G, label="interface projection"))

    return _cached(forms, ("scheme", coupling, wall_mass), build)


def zero_state(forms: FormCatalog) -> SystemState:
    lay = layout(forms)
    return SystemState(
        n=0, t=0.0, v=np.zeros(lay.n_v), p_f=np.zeros(lay.n_pf), U=np.zeros(lay.n_U),
        V=np.zeros(lay.n_U), p_p=np.zeros(lay.n_pp), interface_dofs=lay.interface,
    )


def _fluid_operator(forms: FormCatalog, dt: float, robin: sp.spmatrix, convection=None) -> sp.csr_matrix:
    K = forms.M_f / dt + forms.A_f + robin / dt
    if convection is not None:
        K = K + convection
    B = forms.B_f
    npf = B.shape[0]
    op = sp.bmat([[K, -B.T], [B, sp.csr_matrix((npf, npf))]], format="csr")
    return constrained_operator(op, layout(forms).fluid_fixed)


def _wall_operator(forms: FormCatalog, dt: float, wall_mass: sp.spmatrix) -> sp.csr_matrix:
    inertia = wall_mass + forms.M_G
    stiff = forms.A_e + forms.A_m + forms.M_beta
    G = (forms.B_ep.T + forms.C_ep).tocsr()
    K_U = 2.0 / dt ** 2 * inertia + 0.5 * stiff
    K_p = forms.S_p + dt * forms.A_p
    op = sp.bmat([[K_U, -G], [G.T, K_p]], format="csr")
    return constrained_operator(op, layout(forms).wall_fixed)


# --------------------------------------------------------------------------
# Sub-steps
# --------------------------------------------------------------------------

def _body_load(space, func, t, comps):
    if func is None:
        return None
    if comps == 1:
        src = Source(lambda x, y: func(t, x, y))
    else:
        src = Source(lambda x, y: tuple(func(t, x, y)))
    return assemble_vector(space, src)


def fluid_step(state: SystemState, params: PhysicalParams, forms: FormCatalog, dt: float,
               mode: str = "stokes", coupling: str = "kinematic", wall_mass: str = "lumped",
               domain_velocity: np.ndarray | None = None, p_inlet: float | None = None):
    """Advance the fluid from level ``n`` to ``n+1``.

    Solves the Taylor-Hood saddle system with the tangential interface
    inertia as a Robin term, the pore pressure of level ``n`` as the normal
    interface load, and the inlet pulse at ``t^{n+1}``. In kinematic mode
    the Robin term starts from the membrane velocity and also carries the
    lumped wall mass of the interface nodes.

    Returns
    -------
    v, p_f : ndarray
    """
    lay = layout(forms)
    sch = scheme(forms, coupling, wall_mass)
    t_new = state.t + dt
    if mode == "navier_stokes":
        C = convection_matrix(state.v, forms.spaces, params.rho_f, domain_velocity)
        fac = Factorization(_fluid_operator(forms, dt, sch.robin, C), label="fluid step")
    else:
        fac = _cached(forms, ("fluid", dt, coupling, wall_mass),
                      lambda: Factorization(_fluid_operator(forms, dt, sch.robin), label="fluid step"))
    if coupling == "kinematic":
        robin = forms.M_Gmix @ state.V
        np.add.at(robin, lay.fluid_interface_x, sch.nodal_mass * state.V[lay.interface[0]])
    else:
        robin = forms.M_Gtau @ state.v
    pin = inlet_pressure(t_new, params) if p_inlet is None else p_inlet
    rhs_v = forms.M_f @ state.v / dt + robin / dt - forms.C_fp @ state.p_p + pin * forms.inlet_load
    g = _body_load(forms.spaces.velocity, params.g, t_new, 2)
    if g is not None:
        rhs_v = rhs_v + g
    rhs = np.concatenate([rhs_v, np.zeros(lay.n_pf)])
    rhs[lay.fluid_fixed] = 0.0
    x = fac.solve(rhs, step=state.n + 1)
    return x[:lay.n_v], x[lay.n_v:]


def project_tangential_trace(forms: FormCatalog, v: np.ndarray, V: np.ndarray,
                             wall_mass: str = "lumped") -> np.ndarray:
    """Wall velocity whose tangential interface trace is the projection of ``v . tau``.

    The projection is orthogonal in the interface inertia inner product
    (membrane mass plus the nodal wall mass carried by the fluid step), so
    it never increases kinetic energy. Only the unclamped interface x-DOFs
    change.
    """
    lay = layout(forms)
    sch = scheme(forms, "kinematic", wall_mass)
    free = lay.free_x
    rhs = (forms.M_Gmix.T @ v)[lay.interface[0][free]] + sch.nodal_mass[free] * v[lay.fluid_interface_x[free]]
    out = np.array(V, dtype=float)
    out[lay.interface[0][free]] = sch.projector.solve(rhs)
    return out


def biot_step(state: SystemState, v_new: np.ndarray, params: PhysicalParams, forms: FormCatalog,
              dt: float, V_start: np.ndarray | None = None, wall_mass: str = "lumped"):
    """Advance the wall from level ``n`` to ``n+1`` given the new fluid velocity.

    ``V^{n+1}`` is eliminated through ``V^{n+1} = 2 (U^{n+1} - U^n)/dt - V^n``
    and the remaining system in ``(U^{n+1}, p_p^{n+1})`` is solved. The
    normal fluid flux ``v_new . n`` enters the storage equation on the
    interface.

    Parameters
    ----------
    V_start : ndarray, optional
        Velocity the step starts from; defaults to ``state.V``.

    Returns
    -------
    U, V, p_p : ndarray
    """
    lay = layout(forms)
    M = forms.M_p_lumped if wall_mass == "lumped" else forms.M_p
    V0 = state.V if V_start is None else V_start
    fac = _cached(forms, ("wall", dt, wall_mass),
                  lambda: Factorization(_wall_operator(forms, dt, M), label="biot step"))
    inertia = M + forms.M_G
    stiff = forms.A_e + forms.A_m + forms.M_beta
    G = forms.B_ep.T + forms.C_ep
    t_new = state.t + dt
    rhs_U = inertia @ (2.0 / dt ** 2 * state.U + 2.0 / dt * V0) - 0.5 * (stiff @ state.U)
    if params.p_e:
        rhs_U = rhs_U + params.p_e * forms.exterior_load
    hload = _body_load(forms.spaces.displacement, params.h_force, t_new, 2)
    if hload is not None:
        rhs_U = rhs_U + hload
    rhs_p = forms.S_p @ state.p_p + G.T @ state.U + dt * (forms.C_fp.T @ v_new)
    sload = _body_load(forms.spaces.pore_pressure, params.s, t_new, 1)
    if sload is not None:
        rhs_p = rhs_p + dt * sload
    rhs = np.concatenate([rhs_U, rhs_p])
    rhs[lay.wall_fixed] = 0.0
    x = fac.solve(rhs, step=state.n + 1)
    U = x[:lay.n_U]
    p = x[lay.n_U:]
    V = 2.0 / dt * (U - state.U) - V0
    return U, V, p


def advance(state: SystemState, params: PhysicalParams, forms: FormCatalog, config: TimeConfig,
            energies: list | None = None) -> SystemState:
    """One full step: fluid then wall (or the reverse for ``order="biot_first"``).

    Appends an :class:`EnergyRecord` of the new level to ``energies`` when given.
    """
    dt, cp, wm = config.dt, config.coupling, config.wall_mass
    kinematic = cp == "kinematic"
    if config.order == "fluid_first":
        v, p_f = fluid_step(state, params, forms, dt, config.mode, cp, wm)
        V0 = project_tangential_trace(forms, v, state.V, wm) if kinematic else None
        U, V, p_p = biot_step(state, v, params, forms, dt, V_start=V0, wall_mass=wm)
    else:
        V0 = project_tangential_trace(forms, state.v, state.V, wm) if kinematic else None
        U, V, p_p = biot_step(state, state.v, params, forms, dt, V_start=V0, wall_mass=wm)
        mid = replace(state, U=U, V=V, p_p=p_p)
        v, p_f = fluid_step(mid, params, forms, dt, config.mode, cp, wm)
    new = replace(state, n=state.n + 1, t=(state.n + 1) * dt, v=v, p_f=p_f, U=U, V=V, p_p=p_p)
    if energies is not None:
        energies.append(compute_energy(new, params, forms, coupling=cp, wall_mass=wm))
    return new


def compute_energy(state: SystemState, params: PhysicalParams, forms: FormCatalog,
                   coupling: str = "kinematic", wall_mass: str = "lumped") -> EnergyRecord:
    """Discrete energies of a state.

    ``E_f`` is the fluid kinetic energy; in decoupled mode it also holds the
    tangential interface inertia ``rho_m r_m/2 ||v . tau||^2`` that the
    fluid step carries. ``E_p`` is the wall kinetic energy (in the inner
    product of the wall mass used by the scheme), strain energy (with the
    spring term when ``beta > 0``) and storage energy. ``E_m`` is the
    membrane kinetic energy plus half the symmetric membrane form.
    """
    v, U, V, p = state.v, state.U, state.V, state.p_p
    M = forms.M_p_lumped if wall_mass == "lumped" else forms.M_p
    E_f = 0.5 * v @ (forms.M_f @ v)
    if coupling == "decoupled":
        E_f += 0.5 * v @ (forms.M_Gtau @ v)
    E_p = 0.5 * (V @ (M @ V) + U @ (forms.A_e @ U) + U @ (forms.M_beta @ U) + p @ (forms.S_p @ p))
    E_m = 0.5 * (V @ (forms.M_G @ V) + U @ (forms.A_m_sym @ U))
    return EnergyRecord(
        step=state.n, t=state.t, E_f=float(E_f), E_p=float(E_p), E_m=float(E_m),
        visc_diss=float(v @ (forms.A_f @ v)), darcy_diss=float(p @ (forms.A_p @ p)),
    )


def cfl_bound(params: PhysicalParams, h: float, C_TI: float = 1.0, C_combined: float | None = None) -> float:
    """Sufficient time-step bound ``2 mu_f s0 h / C``.

    ``C`` is ``C_combined`` when given; otherwise the measured trace-inverse
    constant ``C_TI`` times unit Korn, trace and Poincare constants.
    """
    if not h > 0:
        raise ValueError(f"h must be positive, got {h}")
    C = C_TI if C_combined is None else C_combined
    if not C > 0:
        raise ValueError("stability constant must be positive")
    return 2.0 * params.mu_f * params.s0 * h / C


def check_cfl(params: PhysicalParams, h: float, config: TimeConfig, C_TI: float = 1.0) -> bool:
    """Apply the configured CFL policy; returns whether ``dt`` satisfies the bound."""
    bound = cfl_bound(params, h, C_TI, config.cfl_constant if C_TI == 1.0 else None)
    ok = config.dt < bound
    if not ok and config.cfl_enforcement == "reject":
        raise ConfigurationError(f"dt = {config.dt:.3e} exceeds the stability bound {bound:.3e}")
    if not ok and config.cfl_enforcement == "warn":
        warnings.warn(f"dt = {config.dt:.3e} exceeds the sufficient stability bound {bound:.3e}", CFLWarning,
                      stacklevel=2)
    return ok


class BlowUp(RuntimeError):
    """Energy exceeded the blow-up threshold or a DOF became non-finite."""

    def __init__(self, step: int, energy: float):
        self.step = step
        self.energy = energy
        super().__init__(f"blow-up at step {step} (energy {energy:.3e})")


@dataclass
class Trajectory:
    """States (optionally thinned) and per-step energy records of one run."""

    states: list
    energies: list
    blew_up: bool = False
    blowup_step: int | None = None


def run(params: PhysicalParams, forms: FormCatalog, config: TimeConfig, initial: SystemState | None = None,
        keep_states: bool | int = True, blowup_threshold: float = 1e250, raise_on_blowup: bool = False,
        callback=None) -> Trajectory:
    """Time loop from ``initial`` (zero by default) to ``config.t_end``.

    Parameters
    ----------
    keep_states : bool or int
        ``True`` keeps every level, an integer ``k`` keeps every ``k``-th,
        ``False`` keeps only the first and last.
    callback : callable, optional
        ``callback(state)`` after every step.
    """
    n_steps = config.n_steps
    check_cfl(params, forms.spaces.mesh.h, config)
    state = zero_state(forms) if initial is None else initial
    energies = [compute_energy(state, params, forms, coupling=config.coupling, wall_mass=config.wall_mass)]
    states = [state]
    stride = 1 if keep_states is True else (int(keep_states) if keep_states else 0)
    for _ in range(n_steps):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                state = advance(state, params, forms, config, energies)
        except SolverError:
            if np.isfinite(energies[-1].total) and energies[-1].total <= blowup_threshold:
                raise
            state = replace(state, n=state.n + 1)
        rec = energies[-1]
        if not state.is_finite() or not np.isfinite(rec.total) or rec.total > blowup_threshold:
            if raise_on_blowup:
                raise BlowUp(state.n, rec.total)
            states.append(state)
            return Trajectory(states=states, energies=energies, blew_up=True, blowup_step=state.n)
        if stride and state.n % stride == 0:
            states.append(state)
        if callback is not None:
            callback(state)
    if not stride or states[-1] is not state:
        states.append(state)
    return Trajectory(states=states, energies=energies)
