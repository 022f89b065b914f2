import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from fpsi.fem import AssemblyError, build_space
from fpsi.forms import (
    ParameterError, PhysicalParams, Spaces, build_spaces, convection_matrix, form_catalog, inlet_pressure,
    koiter_coeffs,
)
from fpsi.mesh import FLUID

from form_oracles import dense_catalog, form_mismatches
from oracle import assemble_dense
from test_fem import perturbed_mesh


@pytest.fixture(scope="module")
def perturbed_forms():
    return form_catalog(PhysicalParams(), perturbed_mesh(11))


def test_every_form_matches_dense_oracle(perturbed_forms):
    errors = form_mismatches(perturbed_forms)
    assert set(errors) >= set(perturbed_forms.as_dict())
    assert max(errors.values()) < 1e-10, errors


def test_koiter_table_values(params):
    k = koiter_coeffs(params, 0.5)
    assert k.C1 == pytest.approx(7.1333e4, rel=1e-4)
    assert k.C0 == pytest.approx(2.8533e5, rel=1e-4)
    assert k.C2 == pytest.approx(5.7067e4, rel=1e-4)


def test_koiter_direct_evaluation(params):
    mu, lam, r, R = params.mu_m, params.lambda_m, params.r_m, 0.5
    k = koiter_coeffs(params, R)
    eps = 4 * np.finfo(float).eps
    assert k.C1 == pytest.approx(r * (2 * mu * lam / (lam + 2 * mu) + 2 * mu), rel=eps)
    assert k.C0 == pytest.approx(k.C1 / R ** 2, rel=eps)
    assert k.C2 == pytest.approx(r / R * 2 * mu * lam / (lam + 2 * mu), rel=eps)


def test_koiter_lambda_zero(params):
    assert koiter_coeffs(params.replace(lambda_m=0.0), 0.5).C2 == 0.0


def test_koiter_linear_in_thickness(params):
    a = koiter_coeffs(params, 0.5)
    b = koiter_coeffs(params.replace(r_m=2 * params.r_m), 0.5)
    for name in ("C0", "C1", "C2"):
        assert getattr(b, name) == pytest.approx(2 * getattr(a, name), rel=1e-15)


@settings(max_examples=100, deadline=None)
@given(mu=st.floats(1e2, 1e8), lam=st.floats(1e2, 1e8), r=st.floats(1e-4, 1), R=st.floats(1e-2, 10))
def test_koiter_identities(mu, lam, r, R):
    k = koiter_coeffs(PhysicalParams(mu_m=mu, lambda_m=lam, r_m=r), R)
    assert k.C0 == pytest.approx(k.C1 / R ** 2, rel=1e-14)
    assert k.C2 == pytest.approx(r / R * 2 * mu * lam / (lam + 2 * mu), rel=1e-14)
    assert k.C0 > 0 and k.C1 > 0 and k.C2 > 0


def test_inlet_pressure(params):
    assert inlet_pressure(0.0, params) == 0.0
    assert inlet_pressure(0.0015, params) == pytest.approx(1.3334, rel=1e-14)
    assert inlet_pressure(0.004, params) == 0.0
    with pytest.raises(ValueError):
        inlet_pressure(-1.0, params)


@settings(max_examples=50, deadline=None)
@given(t=st.floats(0, 0.01))
def test_inlet_pressure_bounded(t):
    p = PhysicalParams()
    assert 0.0 <= inlet_pressure(t, p) <= p.p_max * (1 + 1e-15)


@pytest.mark.parametrize("key,value", [("kappa", -1.0), ("rho_f", 0.0), ("alpha", 1.5), ("beta", -1.0),
                                       ("lambda_p", -2.0), ("s0", float("nan"))])
def test_parameter_invariants(key, value):
    with pytest.raises(ParameterError) as err:
        PhysicalParams(**{key: value})
    assert err.value.key == key


def test_symmetric_forms(small_forms):
    for name in ("M_f", "A_f", "M_p", "A_e", "A_p", "M_G", "M_beta", "S_p", "A_m_sym"):
        A = getattr(small_forms, name)
        assert abs(A - A.T).max() <= 1e-12 * abs(A).max(), name


def test_membrane_form_asymmetric_but_same_energy(small_forms, rng):
    A, S = small_forms.A_m, small_forms.A_m_sym
    assert abs(A - A.T).max() > 1e-6 * abs(A).max()
    Vp = small_forms.spaces.displacement
    ends = np.concatenate([Vp.dofs("inlet_p"), Vp.dofs("outlet_p")])
    k = small_forms.koiter
    mesh = small_forms.spaces.mesh
    iface = np.unique(mesh.edges_with_tag("interface"))
    iface = iface[np.argsort(mesh.nodes[iface, 0])]
    idx = Vp.vertex_dof(iface)
    for _ in range(5):
        u = rng.standard_normal(Vp.ndofs)
        u[ends] = 0.0
        # energy form evaluated directly from piecewise-linear traces
        x = mesh.nodes[iface, 0]
        ex, ey = u[idx], u[Vp.n_scalar + idx]
        h = np.diff(x)
        dex = np.diff(ex) / h
        int_ey2 = np.sum(h * (ey[:-1] ** 2 + ey[:-1] * ey[1:] + ey[1:] ** 2) / 3)
        int_cross = np.sum(h * dex * 0.5 * (ey[:-1] + ey[1:]))
        energy = k.C1 * np.sum(h * dex ** 2) + k.C0 * int_ey2 + 2 * k.C2 * int_cross
        assert u @ (S @ u) == pytest.approx(energy, rel=1e-10)
        assert u @ (A @ u) == pytest.approx(energy, rel=1e-10)


def test_c_fp_constant_fields(small_forms):
    Vf, Qp = small_forms.spaces.velocity, small_forms.spaces.pore_pressure
    phi = Vf.interpolate(lambda x, y: (0 * x, 1 + 0 * x))
    p = np.ones(Qp.ndofs)
    assert phi @ (small_forms.C_fp @ p) == pytest.approx(6.0, rel=1e-13)


def test_interface_coupling_sparsity(small_forms):
    Vf = small_forms.spaces.velocity
    rows = np.unique(small_forms.C_fp.tocoo().row)
    assert np.all(np.isin(rows, Vf.dofs("interface", comp=1)))
    Vp = small_forms.spaces.displacement
    rows = np.unique(small_forms.C_ep.tocoo().row)
    assert np.all(np.isin(rows, Vp.dofs("interface", comp=1)))


def test_linear_in_viscosity(params, small_mesh):
    spaces = build_spaces(small_mesh)
    a = form_catalog(params, small_mesh, spaces).A_f
    b = form_catalog(params.replace(mu_f=2 * params.mu_f), small_mesh, spaces).A_f
    assert abs(b - 2 * a).max() <= 1e-14 * abs(b).max()


def test_missing_space_rejected(params, small_mesh):
    spaces = build_spaces(small_mesh)
    broken = Spaces(mesh=small_mesh, velocity=spaces.velocity, pressure=None,
                    displacement=spaces.displacement, pore_pressure=spaces.pore_pressure)
    with pytest.raises(AssemblyError):
        form_catalog(params, small_mesh, broken)


def test_convection_zero_field(small_forms):
    n = small_forms.spaces.velocity.ndofs
    assert convection_matrix(np.zeros(n), small_forms.spaces, 1.0).nnz == 0


def test_convection_constant_advection_linear_target(small_forms):
    V = small_forms.spaces.velocity
    a = V.interpolate(lambda x, y: (1 + 0 * x, 0 * x))
    v = V.interpolate(lambda x, y: (x, 0 * x))
    C = convection_matrix(a, small_forms.spaces, 1.0)
    # int rho d_x v_x phi_x = int phi_x over the fluid
    ones = np.zeros(V.ndofs)
    ones[:V.n_scalar] = 1.0
    M = small_forms.M_f.toarray() / small_forms.params.rho_f
    np.testing.assert_allclose(C @ v, M @ ones, atol=1e-12)


def test_convection_random_field_matches_oracle(rng):
    m = perturbed_mesh(4)
    V = build_space(m, FLUID, 2, 2)
    spaces = build_spaces(m)
    a = rng.standard_normal(spaces.velocity.ndofs)
    w = rng.standard_normal(spaces.velocity.ndofs)
    C = convection_matrix(a, spaces, 1.7, domain_velocity=w)
    adv = a - w
    Vs = spaces.velocity

    cells = iter(range(len(Vs.triangles)))

    def local(pr, gr, pc, gc, pts, wq):
        cell = next(cells)
        c = Vs.dof_map[cell]
        ax = pr @ adv[c]
        ay = pr @ adv[Vs.n_scalar + c]
        t = 1.7 * np.einsum("q,qa,qb->ab", wq, pr, ax[:, None] * gc[:, :, 0] + ay[:, None] * gc[:, :, 1])
        out = np.zeros((2 * pr.shape[1], 2 * pc.shape[1]))
        out[:pr.shape[1], :pc.shape[1]] = t
        out[pr.shape[1]:, pc.shape[1]:] = t
        return out

    ref = assemble_dense(Vs, Vs, local)
    assert np.max(np.abs(C.toarray() - ref)) <= 1e-10 * np.max(np.abs(ref))
    assert V.ndofs == Vs.ndofs


def test_convection_skew_for_divergence_free_field(small_forms, rng):
    V = small_forms.spaces.velocity
    c = rng.standard_normal(3)
    # exactly divergence-free quadratic fields
    a = V.interpolate(lambda x, y: (c[0] + c[1] * y + c[2] * x ** 2, c[1] * x - 2 * c[2] * x * y))
    u = rng.standard_normal(V.ndofs)
    walls = np.unique(np.concatenate([V.dofs(t) for t in ("inlet_f", "outlet_f", "axis", "interface")]))
    u[walls] = 0.0
    C = convection_matrix(a, small_forms.spaces, 1.0)
    scale = np.linalg.norm(u) ** 2 * np.abs(a).max()
    assert abs(u @ (C @ u)) <= 1e-8 * scale


def test_convection_shape_checked(small_forms):
    with pytest.raises(AssemblyError):
        convection_matrix(np.zeros(3), small_forms.spaces, 1.0)


def test_dense_catalog_covers_required_names(perturbed_forms):
    names = {"M_f", "A_f", "B_f", "M_Gtau", "C_fp", "M_p", "A_e", "A_p", "B_ep", "C_ep", "A_m", "M_G", "M_beta"}
    assert names <= set(dense_catalog(perturbed_forms))
    for name in names:
        assert sp.issparse(getattr(perturbed_forms, name))
