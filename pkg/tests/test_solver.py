import dataclasses
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fpsi import solver as S
from fpsi.forms import PhysicalParams, form_catalog
from fpsi.mesh import build_mesh

from oracle import duffy_rule, field_at
from test_fem import perturbed_mesh


def driven_state(params, forms, dt=2e-5, steps=20, **kw):
    cfg = S.TimeConfig(dt=dt, t_end=steps * dt, cfl_enforcement="off", **kw)
    return S.run(params, forms, cfg, keep_states=False).states[-1]


def test_fluid_step_zero(params, small_forms):
    v, p = S.fluid_step(S.zero_state(small_forms), params, small_forms, 1e-5, p_inlet=0.0)
    assert not np.any(v) and not np.any(p)


def test_fluid_step_divergence_free(params, small_forms):
    state = driven_state(params, small_forms, steps=5)
    v, _ = S.fluid_step(state, params, small_forms, 2e-5)
    assert np.linalg.norm(v) > 0
    assert np.abs(small_forms.B_f @ v).max() <= 1e-9 * np.linalg.norm(v)


def test_fluid_step_first_order_in_time():
    # fluid sub-problem alone (no wall feedback), forced by a decaying body force
    def g(t, x, y):
        return np.sin(np.pi * y) * np.exp(-t / 2e-3) * 100.0, 0.0 * x

    params = PhysicalParams(p_max=0.0, g=g)
    forms = form_catalog(params, build_mesh(6, 0.5, 0.1, 12, 4, 1))
    T = 2e-3

    def solve(dt):
        state = S.zero_state(forms)
        for n in range(int(round(T / dt))):
            v, p = S.fluid_step(state, params, forms, dt, coupling="decoupled")
            state = dataclasses.replace(state, n=n + 1, t=(n + 1) * dt, v=v, p_f=p)
        return state.v

    ref = solve(T / 256)
    errs = [np.sqrt((solve(dt) - ref) @ (forms.M_f @ (solve(dt) - ref))) for dt in (T / 8, T / 16, T / 32)]
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all((rates > 0.8) & (rates < 1.3)), rates


def test_biot_step_zero(params, small_forms):
    U, V, p = S.biot_step(S.zero_state(small_forms), np.zeros(S.layout(small_forms).n_v), params, small_forms, 1e-5)
    assert not np.any(U) and not np.any(V) and not np.any(p)


@pytest.mark.parametrize("wall_mass", ["lumped", "consistent"])
def test_biot_step_velocity_elimination(params, small_forms, wall_mass):
    state = driven_state(params, small_forms, steps=10, wall_mass=wall_mass)
    v = S.fluid_step(state, params, small_forms, 2e-5, wall_mass=wall_mass)[0]
    U, V, _ = S.biot_step(state, v, params, small_forms, 2e-5, wall_mass=wall_mass)
    lhs = V + state.V
    rhs = 2 * (U - state.U) / 2e-5
    assert np.abs(lhs - rhs).max() <= 1e-10 * np.abs(rhs).max()


def test_biot_step_clamped(params, small_forms):
    state = driven_state(params, small_forms, steps=30)
    Vp = small_forms.spaces.displacement
    clamped = np.concatenate([Vp.dofs("inlet_p"), Vp.dofs("outlet_p")])
    assert np.abs(state.U).max() > 0
    assert np.all(state.U[clamped] == 0.0)
    Qp = small_forms.spaces.pore_pressure
    drained = np.concatenate([Qp.dofs(t) for t in ("inlet_p", "outlet_p", "exterior")])
    assert np.all(state.p_p[drained] == 0.0)


def test_dirichlet_fluid_dofs_hold(params, small_forms):
    state = driven_state(params, small_forms, steps=10)
    assert np.all(state.v[S.layout(small_forms).fluid_fixed] == 0.0)


def _content(forms, state):
    G = forms.B_ep.T + forms.C_ep
    return forms.S_p @ state.p_p + G.T @ state.U


def test_undrained_fluid_content_conserved(small_mesh):
    def h(t, x, y):
        return 1e3 * np.sin(np.pi * x / 6) + 0 * y, 2e3 * np.ones_like(x)

    params = PhysicalParams(kappa=1e-14, alpha=1.0, p_max=0.0, h_force=h)
    forms = form_catalog(params, small_mesh)
    lay = S.layout(forms)
    free = np.setdiff1d(np.arange(lay.n_pp), lay.wall_fixed[lay.wall_fixed >= lay.n_U] - lay.n_U)
    state = S.zero_state(forms)
    cfg = S.TimeConfig(dt=1e-5, t_end=1e-5, cfl_enforcement="off")
    for _ in range(5):
        new = S.advance(state, params, forms, cfg)
        # v . n vanishes on the interface only approximately, so remove the flux term
        flux = 1e-5 * (forms.C_fp.T @ new.v)
        change = (_content(forms, new) - _content(forms, state) - flux)[free]
        G = forms.B_ep.T + forms.C_ep
        scale = max(np.abs(forms.S_p @ new.p_p).max(), np.abs(G.T @ new.U).max())
        assert scale > 0
        assert np.abs(change).max() <= 1e-8 * scale
        state = new


def test_interface_mass_balance(params, small_forms):
    dt = 2e-5
    state = driven_state(params, small_forms, steps=20)
    new = S.advance(state, params, small_forms, S.TimeConfig(dt=dt, t_end=dt, cfl_enforcement="off"))
    lay = S.layout(small_forms)
    fixed_p = lay.wall_fixed[lay.wall_fixed >= lay.n_U] - lay.n_U
    free = np.setdiff1d(np.arange(lay.n_pp), fixed_p)
    f = small_forms
    residual = (f.S_p @ (new.p_p - state.p_p) + (f.B_ep.T + f.C_ep).T @ (new.U - state.U)
                + dt * (f.A_p @ new.p_p) - dt * (f.C_fp.T @ new.v))
    scale = np.abs(dt * (f.C_fp.T @ new.v)).max()
    assert np.abs(residual[free]).max() <= 1e-8 * scale


def test_two_zero_advances_stay_zero(small_forms):
    params = small_forms.params.replace(p_max=0.0)
    forms = form_catalog(params, small_forms.spaces.mesh)
    cfg = S.TimeConfig(dt=1e-5, t_end=2e-5, cfl_enforcement="off")
    traj = S.run(params, forms, cfg)
    last = traj.states[-1]
    assert last.n == 2
    for name in ("v", "p_f", "U", "V", "p_p"):
        assert not np.any(getattr(last, name))
    assert all(e.total == 0 for e in traj.energies)


def test_example_configuration_single_step(params):
    mesh = build_mesh(6, 0.5, 0.1, 375, 31, 7)
    forms = form_catalog(params, mesh)
    energies = []
    state = S.advance(S.zero_state(forms), params, forms,
                      S.TimeConfig(dt=1e-6, t_end=1e-6, cfl_enforcement="off"), energies)
    assert state.is_finite()
    assert len(energies) == 1 and np.isfinite(energies[0].total) and energies[0].total > 0


def test_splitting_order_matters(params, small_forms):
    a = driven_state(params, small_forms, steps=10, order="fluid_first")
    b = driven_state(params, small_forms, steps=10, order="biot_first")
    # from rest both orders share the fluid sequence; the wall lags by one sub-step
    assert np.linalg.norm(a.U - b.U) > 1e-3 * np.linalg.norm(a.U)
    assert np.linalg.norm(a.p_p - b.p_p) > 1e-3 * np.linalg.norm(a.p_p)
    cfg = dict(dt=2e-5, t_end=2e-5, cfl_enforcement="off")
    x = S.advance(a, params, small_forms, S.TimeConfig(order="fluid_first", **cfg))
    y = S.advance(a, params, small_forms, S.TimeConfig(order="biot_first", **cfg))
    assert np.linalg.norm(x.v - y.v) > 0


def test_energy_zero_state(params, small_forms):
    e = S.compute_energy(S.zero_state(small_forms), params, small_forms)
    assert (e.E_f, e.E_p, e.E_m, e.visc_diss, e.darcy_diss) == (0, 0, 0, 0, 0)


def test_energy_constant_velocity(params, small_forms):
    c = 0.7
    Vf = small_forms.spaces.velocity
    state = dataclasses.replace(S.zero_state(small_forms), v=Vf.interpolate(lambda x, y: (c + 0 * x, 0 * x)))
    L, R = 6.0, 0.5
    e = S.compute_energy(state, params, small_forms, coupling="decoupled")
    membrane = 0.5 * params.rho_m * params.r_m * c ** 2 * L
    assert e.E_f == pytest.approx(0.5 * params.rho_f * c ** 2 * L * R + membrane, rel=1e-12)
    assert e.visc_diss == pytest.approx(0.0, abs=1e-14)
    # in kinematic mode the tangential membrane inertia belongs to the wall velocity
    assert S.compute_energy(state, params, small_forms).E_f == pytest.approx(0.5 * c ** 2 * L * R, rel=1e-12)


def test_wall_energy_matches_dense_quadrature(rng):
    params = PhysicalParams()
    forms = form_catalog(params, perturbed_mesh(7))
    Vp, Qp = forms.spaces.displacement, forms.spaces.pore_pressure
    U, V, p = rng.standard_normal(Vp.ndofs) * 1e-4, rng.standard_normal(Vp.ndofs), rng.standard_normal(Qp.ndofs)
    state = dataclasses.replace(S.zero_state(forms), U=U, V=V, p_p=p)
    total = 0.0
    for cell in range(len(Vp.triangles)):
        verts = Vp.mesh.nodes[Vp.mesh.triangles[Vp.triangles[cell]]]
        pts, w = duffy_rule(verts)
        vx, _ = field_at(Vp, V, cell, pts, 0)
        vy, _ = field_at(Vp, V, cell, pts, 1)
        ux, gx = field_at(Vp, U, cell, pts, 0)
        uy, gy = field_at(Vp, U, cell, pts, 1)
        pp, _ = field_at(Qp, p, cell, pts)
        Dxy = 0.5 * (gx[:, 1] + gy[:, 0])
        DD = gx[:, 0] ** 2 + gy[:, 1] ** 2 + 2 * Dxy ** 2
        div = gx[:, 0] + gy[:, 1]
        dens = (0.5 * params.rho_p * (vx ** 2 + vy ** 2) + params.mu_p * DD + 0.5 * params.lambda_p * div ** 2
                + 0.5 * params.s0 * pp ** 2 + 0.5 * params.beta * (ux ** 2 + uy ** 2))
        total += w @ dens
    e = S.compute_energy(state, params, forms, wall_mass="consistent")
    assert e.E_p == pytest.approx(total, rel=1e-10)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31), coupling=st.sampled_from(S.COUPLINGS), wall=st.sampled_from(S.WALL_MASSES))
def test_energy_entries_nonnegative(seed, coupling, wall, small_forms):
    r = np.random.default_rng(seed)
    z = S.zero_state(small_forms)
    state = dataclasses.replace(z, **{k: r.standard_normal(getattr(z, k).shape) for k in ("v", "U", "V", "p_p")})
    e = S.compute_energy(state, small_forms.params, small_forms, coupling, wall)
    assert min(e.E_f, e.E_p, e.E_m, e.visc_diss, e.darcy_diss) >= 0


def test_trace_identity(params, small_forms):
    state = driven_state(params, small_forms, steps=5)
    assert np.array_equal(state.eta, state.U[state.interface_dofs])
    assert np.array_equal(state.xi, state.V[state.interface_dofs])
    assert np.abs(state.eta).max() > 0


def test_cfl_bound_examples(params):
    assert S.cfl_bound(params, 0.016) == pytest.approx(3.5e-7 * 0.016, rel=1e-12)
    observed = 2 * params.mu_f * params.s0 / 2.4e-3
    assert S.cfl_bound(params, 0.016, C_combined=observed) == pytest.approx(2.4e-3 * 0.016, rel=1e-12)
    assert S.cfl_bound(params, 0.032, C_TI=2.5) == pytest.approx(2 * S.cfl_bound(params, 0.016, C_TI=2.5))


def test_cfl_policies(params, small_forms):
    cfg = S.TimeConfig(dt=1e-5, t_end=1e-5, cfl_enforcement="reject")
    with pytest.raises(S.ConfigurationError):
        S.run(params, small_forms, cfg)
    with pytest.warns(S.CFLWarning):
        S.run(params, small_forms, dataclasses.replace(cfg, cfl_enforcement="warn"))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        S.run(params, small_forms, dataclasses.replace(cfg, cfl_enforcement="off"))


@pytest.mark.parametrize("kw", [dict(dt=0.0, t_end=1.0), dict(dt=1e-3, t_end=1e-4), dict(dt=1e-3, t_end=1e-2, mode="x"),
                                dict(dt=1e-3, t_end=1e-2, coupling="x"), dict(dt=1e-3, t_end=1e-2, wall_mass="x")])
def test_time_config_validation(kw):
    with pytest.raises(S.ConfigurationError):
        S.TimeConfig(**kw)


def test_partial_final_step_rejected():
    with pytest.raises(S.ConfigurationError):
        S.TimeConfig(dt=2e-5, t_end=3.3e-4).n_steps
    assert S.TimeConfig(dt=2e-5, t_end=3.4e-4).n_steps == 17


def test_blowup_detection(params, small_forms):
    cfg = S.TimeConfig(dt=1e-5, t_end=1e-4, cfl_enforcement="off")
    traj = S.run(params, small_forms, cfg, blowup_threshold=1e-14)
    assert traj.blew_up and traj.blowup_step is not None
    with pytest.raises(S.BlowUp):
        S.run(params, small_forms, cfg, blowup_threshold=1e-14, raise_on_blowup=True)


def test_navier_stokes_mode_runs(params, small_forms):
    a = driven_state(params, small_forms, steps=10, mode="navier_stokes")
    b = driven_state(params, small_forms, steps=10)
    assert a.is_finite()
    # velocities are tiny, so convection is a small correction
    assert np.linalg.norm(a.v - b.v) <= 1e-3 * np.linalg.norm(b.v)


def test_run_deterministic(params, small_forms):
    a = driven_state(params, small_forms, steps=10)
    b = driven_state(params, small_forms, steps=10)
    for name in ("v", "p_f", "U", "V", "p_p"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
