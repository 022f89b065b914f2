"""Physical parameters, membrane coefficients, inlet pulse and the assembled forms.

Sign conventions: the interface is the line ``y = R`` with unit normal
``n = e_y`` pointing from the fluid into the wall and tangent ``tau = e_x``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from . import fem
from .fem import (
    DivergencePairing, FESpace, Laplacian, ScalarMass, StrainEnergy, TraceProduct,
    assemble, assemble_trace, assemble_trace_vector,
)
from .mesh import FLUID, PORO, BilayerMesh


class ParameterError(ValueError):
    """A physical parameter violates its admissible range."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


@dataclass(frozen=True)
class PhysicalParams:
    """Physical coefficients in CGS units; defaults reproduce the benchmark table.

    ``g``, ``h_force`` and ``s`` are optional callables ``f(t, x, y)`` for the
    fluid body force, the wall body force and the fluid-content source. Vector
    forces return a pair of arrays.
    """

    rho_f: float = 1.0
    mu_f: float = 0.035
    rho_m: float = 1.1
    r_m: float = 0.02
    mu_m: float = 1.07e6
    lambda_m: float = 4.28e6
    rho_p: float = 1.1
    mu_p: float = 1.07e6
    lambda_p: float = 4.28e6
    kappa: float = 5e-9
    s0: float = 5e-6
    alpha: float = 1.0
    beta: float = 5e7
    p_e: float = 0.0
    p_max: float = 1.3334
    T_max: float = 0.003
    g: Optional[Callable] = None
    h_force: Optional[Callable] = None
    s: Optional[Callable] = None

    def __post_init__(self):
        for key in ("rho_f", "mu_f", "rho_m", "r_m", "rho_p", "mu_p", "kappa", "s0", "T_max"):
            val = getattr(self, key)
            if not (np.isfinite(val) and val > 0):
                raise ParameterError(key, f"must be positive, got {val}")
        for key in ("lambda_m", "lambda_p", "beta", "p_max"):
            val = getattr(self, key)
            if not (np.isfinite(val) and val >= 0):
                raise ParameterError(key, f"must be non-negative, got {val}")
        if not (0 < self.alpha <= 1):
            raise ParameterError("alpha", f"must lie in (0, 1], got {self.alpha}")
        if not np.isfinite(self.p_e):
            raise ParameterError("p_e", "must be finite")

    def replace(self, **changes) -> "PhysicalParams":
        return dataclasses.replace(self, **changes)

    @property
    def membrane_inertia(self) -> float:
        """Mass per unit interface length, ``rho_m * r_m``."""
        return self.rho_m * self.r_m


@dataclass(frozen=True)
class KoiterCoeffs:
    """Linearized membrane coefficients: ``C0`` (dyn/cm^3), ``C1`` (dyn/cm), ``C2`` (dyn/cm^2)."""

    C0: float
    C1: float
    C2: float


def koiter_coeffs(params: PhysicalParams, R: float) -> KoiterCoeffs:
    """Membrane coefficients of a cylinder of reference radius ``R``.

    ``C1 = r_m (2 mu lam / (lam + 2 mu) + 2 mu)``, ``C0 = C1 / R^2`` and
    ``C2 = (r_m / R) 2 mu lam / (lam + 2 mu)`` with the membrane Lame constants.
    """
    mu, lam = params.mu_m, params.lambda_m
    if not lam + 2 * mu > 0:
        raise ParameterError("lambda_m", "lambda_m + 2 mu_m must be positive")
    if not R > 0:
        raise ParameterError("R", f"must be positive, got {R}")
    coupled = 2 * mu * lam / (lam + 2 * mu)
    C1 = params.r_m * (coupled + 2 * mu)
    return KoiterCoeffs(C0=C1 / R ** 2, C1=C1, C2=params.r_m / R * coupled)


def inlet_pressure(t, params: PhysicalParams):
    """Inlet pressure pulse ``p_max/2 (1 - cos(2 pi t / T_max))`` on ``[0, T_max]``, zero after."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("inlet_pressure needs t >= 0")
    val = np.where(t <= params.T_max, 0.5 * params.p_max * (1 - np.cos(2 * np.pi * t / params.T_max)), 0.0)
    return float(val) if val.ndim == 0 else val


@dataclass(frozen=True)
class Spaces:
    """Discrete spaces: Taylor-Hood fluid pair and degree-1 wall fields."""

    mesh: BilayerMesh
    velocity: FESpace       # P2 vector on the fluid
    pressure: FESpace       # P1 scalar on the fluid
    displacement: FESpace   # P1 vector on the wall (also carries V)
    pore_pressure: FESpace  # P1 scalar on the wall


def build_spaces(mesh: BilayerMesh) -> Spaces:
    return Spaces(
        mesh=mesh,
        velocity=fem.build_space(mesh, FLUID, 2, 2),
        pressure=fem.build_space(mesh, FLUID, 1, 1),
        displacement=fem.build_space(mesh, PORO, 1, 2),
        pore_pressure=fem.build_space(mesh, PORO, 1, 1),
    )


def membrane_terms(coeffs: KoiterCoeffs, symmetric: bool = False) -> list[TraceProduct]:
    """Trace products of the membrane form on the wall displacement space.

    With ``symmetric=False`` this is the form with the one-sided ``C2``
    coupling ``-C2 (eta_y', zeta_x) + C2 (eta_x', zeta_y)``; with
    ``symmetric=True`` it is the energy form with ``C2 (eta_x', zeta_y) +
    C2 (eta_y, zeta_x')``. The two agree on traces vanishing at ``x = 0, L``.
    """
    C0, C1, C2 = coeffs.C0, coeffs.C1, coeffs.C2
    terms = [
        TraceProduct(row_comp=0, col_comp=0, row_derivative=1, col_derivative=1, coef=C1),
        TraceProduct(row_comp=1, col_comp=1, coef=C0),
        TraceProduct(row_comp=1, col_comp=0, col_derivative=1, coef=C2),
    ]
    if symmetric:
        terms.append(TraceProduct(row_comp=0, col_comp=1, row_derivative=1, coef=C2))
    else:
        terms.append(TraceProduct(row_comp=0, col_comp=1, col_derivative=1, coef=-C2))
    return terms


@dataclass(frozen=True, eq=False)
class FormCatalog:
    """Assembled matrices of every bilinear form, coefficients included.

    Fluid space rows are velocity test functions; ``B_f`` and ``B_ep`` have
    pressure test rows. ``C_fp`` maps pore pressure to fluid velocity tests
    and ``C_ep`` maps pore pressure to wall displacement tests.
    """

    params: PhysicalParams
    spaces: Spaces
    koiter: KoiterCoeffs
    M_f: sp.csr_matrix
    A_f: sp.csr_matrix
    B_f: sp.csr_matrix
    M_Gtau: sp.csr_matrix
    C_fp: sp.csr_matrix
    M_p: sp.csr_matrix
    A_e: sp.csr_matrix
    A_p: sp.csr_matrix
    B_ep: sp.csr_matrix
    C_ep: sp.csr_matrix
    A_m: sp.csr_matrix
    M_G: sp.csr_matrix
    M_beta: sp.csr_matrix
    S_p: sp.csr_matrix
    A_m_sym: sp.csr_matrix
    M_Gmix: sp.csr_matrix
    M_p_lumped: sp.csr_matrix
    inlet_load: np.ndarray
    exterior_load: np.ndarray

    def as_dict(self) -> dict:
        names = ("M_f", "A_f", "B_f", "M_Gtau", "C_fp", "M_p", "A_e", "A_p", "B_ep", "C_ep",
                 "A_m", "M_G", "M_beta")
        return {k: getattr(self, k) for k in names}


def form_catalog(params: PhysicalParams, mesh: BilayerMesh, spaces: Spaces | None = None,
                 workers: int = 1) -> FormCatalog:
    """Assemble every form of the coupled problem on the given spaces.

    ``M_Gtau`` is the interface mass on the tangential fluid velocity,
    ``M_G`` the interface mass on both wall components, and ``M_Gmix``
    pairs the tangential fluid trace (rows) with the tangential wall trace
    (columns); all three carry ``rho_m r_m``. ``M_p_lumped`` is the
    row-sum lumped wall mass. ``inlet_load`` is
    ``int_inlet phi_x dy`` (times ``p_in(t)`` at run time) and
    ``exterior_load`` is ``-int_ext phi_y dx`` (times ``p_e``).
    """
    if spaces is None:
        spaces = build_spaces(mesh)
    if spaces.mesh is not mesh:
        raise fem.AssemblyError("spaces were built on a different mesh")
    Vf, Qf, Vp, Qp = spaces.velocity, spaces.pressure, spaces.displacement, spaces.pore_pressure
    if Vf is None or Qf is None or Vp is None or Qp is None:
        raise fem.AssemblyError("every space is required")
    k = koiter_coeffs(params, mesh.R)
    rm = params.membrane_inertia
    M_p = assemble(Vp, Vp, ScalarMass(params.rho_p), workers)
    return FormCatalog(
        params=params,
        spaces=spaces,
        koiter=k,
        M_f=assemble(Vf, Vf, ScalarMass(params.rho_f), workers),
        A_f=assemble(Vf, Vf, StrainEnergy(params.mu_f, 0.0), workers),
        B_f=assemble(Qf, Vf, DivergencePairing(1.0), workers),
        M_Gtau=assemble_trace(Vf, Vf, TraceProduct(0, 0, coef=rm)),
        C_fp=assemble_trace(Vf, Qp, TraceProduct(1, 0)),
        M_p=M_p,
        A_e=assemble(Vp, Vp, StrainEnergy(params.mu_p, params.lambda_p), workers),
        A_p=assemble(Qp, Qp, Laplacian(params.kappa), workers),
        B_ep=assemble(Qp, Vp, DivergencePairing(params.alpha), workers),
        C_ep=assemble_trace(Vp, Qp, TraceProduct(1, 0, coef=params.alpha)),
        A_m=assemble_trace(Vp, Vp, membrane_terms(k)),
        M_G=assemble_trace(Vp, Vp, [TraceProduct(0, 0, coef=rm), TraceProduct(1, 1, coef=rm)]),
        M_beta=assemble(Vp, Vp, ScalarMass(params.beta), workers),
        S_p=assemble(Qp, Qp, ScalarMass(params.s0), workers),
        A_m_sym=assemble_trace(Vp, Vp, membrane_terms(k, symmetric=True)),
        M_Gmix=assemble_trace(Vf, Vp, TraceProduct(0, 0, coef=rm)),
        M_p_lumped=lumped(M_p),
        inlet_load=assemble_trace_vector(Vf, lambda x, y: np.ones_like(x), comp=0, tag="inlet_f"),
        exterior_load=-assemble_trace_vector(Vp, lambda x, y: np.ones_like(x), comp=1, tag="exterior"),
    )


def lumped(M: sp.spmatrix) -> sp.csr_matrix:
    """Row-sum lumped (diagonal) version of a mass matrix."""
    return sp.diags(np.asarray(M.sum(axis=1)).ravel()).tocsr()


def convection_matrix(advecting: np.ndarray, spaces: Spaces, rho: float,
                      domain_velocity: np.ndarray | None = None, workers: int = 1) -> sp.csr_matrix:
    """Matrix of ``rho ((a - w) . grad) u . phi`` on the fluid velocity space."""
    V = spaces.velocity
    a = np.asarray(advecting, dtype=float)
    if a.shape != (V.ndofs,):
        raise fem.AssemblyError(f"advecting field has shape {a.shape}, expected ({V.ndofs},)")
    if domain_velocity is not None and np.shape(domain_velocity) != (V.ndofs,):
        raise fem.AssemblyError("domain velocity must live in the fluid velocity space")
    if not np.any(a) and (domain_velocity is None or not np.any(domain_velocity)):
        return sp.csr_matrix((V.ndofs, V.ndofs))
    return assemble(V, V, fem.Convection(rho, a, domain_velocity), workers)
