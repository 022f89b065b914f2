import dataclasses

import numpy as np
import pytest

from fpsi import solver as S
from fpsi import verify as V
from fpsi.forms import PhysicalParams, form_catalog
from fpsi.mesh import build_mesh


@pytest.fixture(scope="module")
def tiny_mesh():
    return build_mesh(6, 0.5, 0.1, 20, 4, 2)


@pytest.fixture(scope="module")
def tiny_forms(tiny_mesh):
    return form_catalog(PhysicalParams(), tiny_mesh)


def random_state(forms, rng, scale=1e-3):
    """Admissible random state: constrained DOFs zero and the tangential trace shared with the wall."""
    lay = S.layout(forms)
    z = S.zero_state(forms)
    v = rng.standard_normal(lay.n_v) * scale
    U = rng.standard_normal(lay.n_U) * scale * 1e-3
    Vw = rng.standard_normal(lay.n_U) * scale
    p = rng.standard_normal(lay.n_pp) * scale
    v[lay.fluid_fixed] = 0
    fixed_U = lay.wall_fixed[lay.wall_fixed < lay.n_U]
    fixed_p = lay.wall_fixed[lay.wall_fixed >= lay.n_U] - lay.n_U
    U[fixed_U] = Vw[fixed_U] = 0
    p[fixed_p] = 0
    v[V._interface_prolongation(forms)[0]] = 0
    Vw[lay.interface[0]] = 0
    return dataclasses.replace(z, v=v, U=U, V=Vw, p_p=p)


def test_monolithic_zero_drive(tiny_mesh):
    params = PhysicalParams(p_max=0.0)
    traj = V.monolithic_solve(params, tiny_mesh, 1e-5, 5e-5)
    for s in traj.states:
        assert not any(np.any(getattr(s, k)) for k in ("v", "p_f", "U", "V", "p_p"))


@pytest.mark.parametrize("dt", [1e-5, 1e-3, 1e-1])
def test_monolithic_unconditionally_dissipative(tiny_mesh, rng, dt):
    params = PhysicalParams(p_max=0.0)
    forms = form_catalog(params, tiny_mesh)
    init = random_state(forms, rng)
    traj = V.monolithic_solve(params, tiny_mesh, dt, 100 * dt, initial=init, forms=forms, keep_states=False)
    E = np.array([e.total for e in traj.energies])
    assert E[0] > 0
    assert np.all(np.diff(E) <= 1e-10 * E[0])


def test_monolithic_size_guard(tiny_mesh):
    with pytest.raises(V.SizeGuardError, match="max_dofs"):
        V.monolithic_solve(PhysicalParams(), tiny_mesh, 1e-5, 1e-5, max_dofs=100)


def test_monolithic_no_slip(tiny_forms):
    params = tiny_forms.params
    dt = 2e-5
    traj = V.monolithic_solve(params, tiny_forms.spaces.mesh, dt, 10 * dt, forms=tiny_forms)
    a, b = traj.states[-2], traj.states[-1]
    fluid_x, T, wall_x = V._interface_prolongation(tiny_forms)
    np.testing.assert_allclose(b.v[fluid_x], T @ ((b.U[wall_x] - a.U[wall_x]) / dt), rtol=1e-10, atol=1e-20)


def test_split_matches_monolithic_first_order(tiny_forms):
    params = tiny_forms.params
    mesh = tiny_forms.spaces.mesh
    gaps = []
    for dt in (4e-5, 2e-5, 1e-5):
        cfg = S.TimeConfig(dt=dt, t_end=1e-3, cfl_enforcement="off")
        split = S.run(params, tiny_forms, cfg).states
        mono = V.monolithic_solve(params, mesh, dt, 1e-3, forms=tiny_forms).states
        gaps.append(max(np.sqrt((a.v - b.v) @ (tiny_forms.M_f @ (a.v - b.v))) for a, b in zip(split, mono)))
    ratios = np.array(gaps[:-1]) / np.array(gaps[1:])
    assert np.all((ratios > 1.6) & (ratios < 2.6)), ratios


def test_elastic_zero_drive(tiny_mesh):
    traj = V.elastic_wall_solve(PhysicalParams(p_max=0.0), tiny_mesh, 1e-5, 5e-5)
    assert all(not np.any(s.U) and not np.any(s.v) for s in traj.states)
    assert all(not np.any(s.p_p) for s in traj.states)


def _peak_eta(traj, forms):
    series = V.mean_quantities(traj.states, forms)
    return np.abs(series.eta_y).max()


@pytest.mark.slow
def test_biot_limit_approaches_elastic_wall():
    mesh = V.mesh_for_dx(0.05, aspect=4)
    dt, T = 1e-5, 3e-3
    elastic_params = PhysicalParams()
    f_el = form_catalog(elastic_params, mesh)
    el = V.elastic_wall_solve(elastic_params, mesh, dt, T, forms=f_el, keep_states=10)
    limit = PhysicalParams(kappa=1e-14, s0=1e-12)
    f_lim = form_catalog(limit, mesh)
    mono = V.monolithic_solve(limit, mesh, dt, T, forms=f_lim, max_dofs=50000, keep_states=10)
    a, b = _peak_eta(el, f_el), _peak_eta(mono, f_lim)
    assert abs(a - b) / a < 0.10


def test_self_reference_error_is_zero(tiny_forms, rng):
    s = V.SpaceSampler(tiny_forms.spaces.velocity)
    u = rng.standard_normal(tiny_forms.spaces.velocity.ndofs)
    assert s.squared(u, tiny_forms.spaces.velocity, u) == (0.0, 0.0)


def test_sampler_matches_mass_matrix(tiny_forms, rng):
    Vp = tiny_forms.spaces.displacement
    u = rng.standard_normal(Vp.ndofs)
    l2, _ = V.SpaceSampler(Vp).squared(u)
    assert l2 == pytest.approx(u @ (tiny_forms.M_p @ u) / tiny_forms.params.rho_p, rel=1e-9)


def test_time_convergence_coarse(tiny_mesh):
    rep = V.convergence_in_time(PhysicalParams(), tiny_mesh, [4e-5, 2e-5, 1e-5], 2.5e-6, 1e-3)
    assert rep.kind == "time"
    for var, norms in V.DEFAULT_NORMS.items():
        for norm in norms:
            rows = rep.series(var, norm)
            assert len(rows) == 3 and rows[0].rate is None
            assert all(r.abs_error > 0 and not r.blew_up for r in rows)
    assert 0.7 <= rep.fitted_rate("v", "linf_L2") <= 1.5
    assert rep.monotone_fraction() >= 0.8


def test_time_convergence_rejects_bad_reference(tiny_mesh):
    with pytest.raises(S.ConfigurationError):
        V.convergence_in_time(PhysicalParams(), tiny_mesh, [2e-5, 1e-5], 8e-6, 1e-4)
    with pytest.raises(S.ConfigurationError):
        V.convergence_in_time(PhysicalParams(), tiny_mesh, [3e-5], 1e-5 / 1.1, 3e-4)


def test_time_convergence_marks_blowup(tiny_mesh):
    rep = V.convergence_in_time(PhysicalParams(), tiny_mesh, [2e-4, 2e-5], 5e-6, 2e-3, blowup_threshold=1e-9)
    blown = [r for r in rep.rows if r.resolution == 2e-4]
    assert blown and all(r.blew_up for r in blown)
    assert np.isnan(rep.fitted_rate("v", "linf_L2"))


def test_rate_formula():
    rows = [(0.4, 1.0), (0.2, 0.3), (0.1, 0.1)]
    acc = []
    for res, e in rows:
        a = V._Accumulator()
        a.add(e ** 2, 0.0, 1.0)
        acc.append((res, {"v": a}, False))
    ref = V._Accumulator()
    ref.add(4.0, 0.0, 1.0)
    rep = V._finish_report("time", 0.05, acc, {"v": ref}, {"v": ("linf_L2",)})
    r = rep.series("v", "linf_L2")
    assert r[1].rate == pytest.approx(np.log(1 / 0.3) / np.log(2))
    assert r[2].rate == pytest.approx(np.log(3) / np.log(2))
    assert r[0].rel_error == pytest.approx(0.5)


def test_time_errors_linear_in_drive_amplitude():
    # absolute errors scale with p_max while relative errors and rates do not
    mesh = build_mesh(6, 0.5, 0.1, 20, 4, 2)
    a = V.convergence_in_time(PhysicalParams(), mesh, [2e-5, 1e-5], 2.5e-6, 4e-4)
    b = V.convergence_in_time(PhysicalParams(p_max=2 * 1.3334), mesh, [2e-5, 1e-5], 2.5e-6, 4e-4)
    for ra, rb in zip(a.rows, b.rows):
        assert rb.abs_error == pytest.approx(2 * ra.abs_error, rel=1e-6)
        assert rb.rel_error == pytest.approx(ra.rel_error, rel=1e-6)


def test_space_convergence_identical_resolution_zero():
    rep = V.convergence_in_space(PhysicalParams(), 2e-5, [0.05], 0.05 * (1 - 1e-9), 2e-4, aspect=4)
    # mesh_for_dx rounds to the same mesh, so the error vanishes
    assert all(r.abs_error == 0.0 for r in rep.rows)


def test_space_convergence_rejects_bad_reference():
    with pytest.raises(S.ConfigurationError):
        V.convergence_in_space(PhysicalParams(), 1e-5, [0.05, 0.025], 0.05, 1e-4)


def test_mesh_for_dx():
    m = V.mesh_for_dx(0.025, aspect=4)
    assert (m.nx, m.ny_f, m.ny_p) == (60, 20, 4)


def test_stability_sweep_small():
    res = V.stability_sweep(PhysicalParams(), [0.05, 0.025], [2e-5, 4e-5, 8e-5, 1.6e-4, 3.2e-4, 6.4e-4],
                            t_end=6e-3, aspect=4, n_bisect=3)
    for ln in res.lines:
        assert ln.dt_critical is not None and ln.monotone
        assert ln.bracket[0] < ln.dt_critical < ln.bracket[1]
        flags = [p.blew_up for p in sorted(ln.points, key=lambda p: p.dt)]
        assert flags == sorted(flags)
    c = res.critical
    assert c[0.025] < c[0.05]
    again = V.stability_sweep(PhysicalParams(), [0.05, 0.025], [2e-5, 4e-5, 8e-5, 1.6e-4, 3.2e-4, 6.4e-4],
                              t_end=6e-3, aspect=4, n_bisect=3)
    assert again.critical == c


def test_stability_sweep_outside_grid():
    res = V.stability_sweep(PhysicalParams(), [0.05], [1e-5, 2e-5], t_end=4e-4, aspect=4)
    assert res.lines[0].dt_critical is None
    assert "threshold outside grid" in res.lines[0].note


def test_stability_sweep_grid_must_ascend():
    with pytest.raises(S.ConfigurationError):
        V.stability_sweep(PhysicalParams(), [0.05], [2e-5, 1e-5], t_end=4e-4, aspect=4)


def test_mean_quantities_uniform_pressure(tiny_forms):
    z = S.zero_state(tiny_forms)
    state = dataclasses.replace(z, p_f=np.full_like(z.p_f, 2.5), p_p=np.full_like(z.p_p, -1.5))
    series = V.mean_quantities([state], tiny_forms)
    np.testing.assert_allclose(series.pf_mean, 2.5, rtol=1e-13)
    np.testing.assert_allclose(series.pp_mean, -1.5, rtol=1e-13)


def test_mean_quantities_parabolic_flowrate(tiny_forms):
    R, v0 = 0.5, 3.0
    Vf = tiny_forms.spaces.velocity
    v = Vf.interpolate(lambda x, y: (v0 * (1 - (y / R) ** 2), 0 * x))
    state = dataclasses.replace(S.zero_state(tiny_forms), v=v)
    series = V.mean_quantities([state], tiny_forms, stations=[1.5, 3.0, 4.5])
    np.testing.assert_allclose(series.flowrate, 2 / 3 * v0 * R, rtol=1e-13)


def test_mean_quantities_membrane_displacement(tiny_forms):
    Vp = tiny_forms.spaces.displacement
    U = Vp.interpolate(lambda x, y: (0 * x, 1e-4 * x * (6 - x)))
    state = dataclasses.replace(S.zero_state(tiny_forms), U=U)
    series = V.mean_quantities([state], tiny_forms, stations=[3.0])
    assert series.eta_y[0, 0] == pytest.approx(9e-4, rel=1e-12)


def test_station_snapping_warns(tiny_forms):
    with pytest.warns(UserWarning, match="nearest vertical mesh line"):
        ops = V.StationOperators(tiny_forms, [3.1])
    assert ops.x[0] == pytest.approx(3.0)


def test_peak_summary():
    t = np.array([0.0, 1.0, 2.0, 3.0])
    series = V.StationSeries(t=t, x=np.array([1.0, 3.0]),
                             pf_mean=np.array([[0, 0], [1, 2], [3, 5], [0, 1]], float),
                             pp_mean=np.array([[0, 0], [0, -4], [1, 2], [0, 0]], float),
                             flowrate=np.zeros((4, 2)), eta_y=np.array([[0, 0], [1, 2], [3, 1], [0, 0]], float))
    s = V.peak_summary(series, 3.0)
    assert s["peak_eta_y"] == 3 and s["peak_pp_mean"] == 4 and s["pf_peak_time"] == 2.0
