import numpy as np
import pytest

from entrofv.entropy import lp_distance
from entrofv.linalg import NewtonConfig, NonConvergence, SparseMatrix, newton_solve
from entrofv.mesh import BoundarySpec, reference_mesh
from entrofv.presets import fill_problem, pn_problem, sweep_problem, toy_problem
from entrofv.schemes import (SCHEMES, SCHARFETTER_GUMMEL, UPWIND, DdData,
                             advection_from_potential, edge_differences,
                             signed_power, transport_data)
from entrofv.solvers import (DdState, SolverError, StepperConfig, adaptive_time_loop,
                             dd_equilibrium_offsets, run_transient,
                             solve_dd_poisson, solve_dd_steady,
                             solve_dd_thermal, solve_fp_steady,
                             solve_pme_steady, step_dd, step_fp, step_pme)


def _two_cell_data(mesh, f_left=1.0, f_right=2.0):
    fd = np.full(mesh.n_edges, np.nan)
    fd[1], fd[2] = f_left, f_right
    return transport_data(mesh, np.ones(mesh.n_edges), np.zeros(mesh.n_edges), fd)


# ---------------------------------------------------------------------------
# linear model


def test_fp_steady_two_cell_oracle(two_cell_mesh):
    data = _two_cell_data(two_cell_mesh)
    f = solve_fp_steady(two_cell_mesh, data, UPWIND)
    np.testing.assert_allclose(f, [1.25, 1.75], rtol=1e-13)


def test_fp_steady_constant_data(mesh0, rng):
    fd = np.where(mesh0.dirichlet, 4.2, np.nan)
    data = transport_data(mesh0, rng.uniform(0.5, 2.0, mesh0.n_edges),
                          np.zeros(mesh0.n_edges), fd)
    for scheme in SCHEMES.values():
        f = solve_fp_steady(mesh0, data, scheme)
        np.testing.assert_allclose(f, 4.2, rtol=1e-12)


def test_fp_steady_sg_exact_on_toy():
    prob = toy_problem(0)
    f = solve_fp_steady(prob.mesh, prob.data, SCHARFETTER_GUMMEL)
    exact = np.exp(prob.mesh.cell_center[:, 0])
    assert lp_distance(prob.mesh, f, exact, 1) < 1e-12


def test_fp_steady_max_principle_divergence_free(rng):
    mesh = reference_mesh(1, BoundarySpec.all_dirichlet())
    geo = mesh.geometry
    phi_cells = 0.9 * mesh.cell_center[:, 0] + 0.4 * mesh.cell_center[:, 1]
    phi_dir = np.where(mesh.dirichlet,
                       0.9 * geo.edge_midpoint[:, 0] + 0.4 * geo.edge_midpoint[:, 1],
                       np.nan)
    u = advection_from_potential(mesh, phi_cells, phi_dir)
    fd = np.where(mesh.dirichlet, rng.uniform(1.0, 3.0, mesh.n_edges), np.nan)
    data = transport_data(mesh, np.ones(mesh.n_edges), u, fd)
    lo, hi = np.nanmin(fd), np.nanmax(fd)
    for scheme in SCHEMES.values():
        f = solve_fp_steady(mesh, data, scheme)
        assert np.all(f >= lo - 1e-12)
        assert np.all(f <= hi + 1e-12)


def test_step_fp_fixed_point(two_cell_mesh):
    data = _two_cell_data(two_cell_mesh)
    steady = solve_fp_steady(two_cell_mesh, data, UPWIND)
    after = step_fp(two_cell_mesh, data, UPWIND, steady, 0.3)
    np.testing.assert_allclose(after, steady, rtol=1e-12)


def test_step_fp_large_step_reaches_steady(two_cell_mesh, rng):
    data = _two_cell_data(two_cell_mesh)
    steady = solve_fp_steady(two_cell_mesh, data, UPWIND)
    f0 = rng.uniform(0.1, 3.0, 2)
    after = step_fp(two_cell_mesh, data, UPWIND, f0, 1e6)
    np.testing.assert_allclose(after, steady, rtol=1e-4)


def test_step_fp_preserves_sign_and_mass_balance(mesh0, rng):
    prob = toy_problem(0)
    f0 = prob.f0
    dt = 1e-2
    f1 = step_fp(prob.mesh, prob.data, UPWIND, f0, dt)
    assert np.all(f1 >= 0)
    # mass change equals the net boundary influx of the new state
    from entrofv.schemes import edge_fluxes
    flux = edge_fluxes(prob.mesh, prob.data, UPWIND, f1)
    boundary_out = np.sum(flux[prob.mesh.dirichlet])
    mass_rate = np.sum(prob.mesh.cell_area * (f1 - f0)) / dt
    assert mass_rate == pytest.approx(-boundary_out, rel=1e-10)


def test_step_fp_first_order_in_time():
    """Richardson comparison against the closed-form transient solution."""
    prob = toy_problem(2)
    mesh = prob.mesh
    t_end = 0.1
    cen = mesh.geometry.cell_centroid
    rate = np.pi ** 2 + 0.25
    exact = np.exp(cen[:, 0]) + np.exp(cen[:, 0] / 2 - rate * t_end) \
        * np.sin(np.pi * cen[:, 0])
    errors = []
    for dt in (0.02, 0.01, 0.005):
        f = prob.f0.copy()
        steps = int(round(t_end / dt))
        for _ in range(steps):
            f = step_fp(mesh, prob.data, SCHARFETTER_GUMMEL, f, dt)
        errors.append(lp_distance(mesh, f, exact, 1))
    # successive error differences halve when the time error is first order
    ratio = (errors[0] - errors[1]) / (errors[1] - errors[2])
    assert 1.5 < ratio < 2.6


# ---------------------------------------------------------------------------
# nonlinear diffusion


def test_pme_steady_constant(mesh0):
    fd = np.where(mesh0.dirichlet, 1.7, np.nan)
    f = solve_pme_steady(mesh0, fd, 4.0)
    np.testing.assert_allclose(f, 1.7, rtol=1e-12)


def test_pme_steady_all_neumann_mass_average(single_cell_mesh):
    mesh = single_cell_mesh
    fd = np.full(mesh.n_edges, np.nan)
    f = solve_pme_steady(mesh, fd, 2.0, initial=np.array([0.018]))
    np.testing.assert_allclose(f, 0.018)
    with pytest.raises(SolverError):
        solve_pme_steady(mesh, fd, 2.0)


def _dense_laplace_oracle(mesh, u_dirichlet):
    """Independent steady oracle: dense assembly by explicit loops."""
    n = mesh.n_cells
    a = np.zeros((n, n))
    b = np.zeros(n)
    for e in range(mesh.n_edges):
        tau = mesh.edge_length[e] / mesh.edge_d[e]
        i, j = mesh.edge_cells[e]
        if mesh.edge_tag[e] == 0:
            a[i, i] += tau
            a[j, j] += tau
            a[i, j] -= tau
            a[j, i] -= tau
        elif mesh.edge_tag[e] == 1:
            a[i, i] += tau
            b[i] += tau * u_dirichlet[e]
    return np.linalg.solve(a, b)


def test_pme_steady_filling_against_dense_oracle():
    prob = fill_problem(2)
    mesh = prob.mesh
    f = solve_pme_steady(mesh, prob.f_dirichlet, prob.m)
    u_dir = np.where(np.isfinite(prob.f_dirichlet), prob.f_dirichlet ** prob.m, np.nan)
    oracle = _dense_laplace_oracle(mesh, u_dir) ** (1.0 / prob.m)
    np.testing.assert_allclose(f, oracle, rtol=1e-10)
    assert np.all(f >= 1.0 - 1e-12)
    assert np.all(f <= 2.5 + 1e-12)


def test_step_pme_fixed_point(mesh0):
    fd = np.where(mesh0.dirichlet, 2.0, np.nan)
    steady = solve_pme_steady(mesh0, fd, 3.0)
    out = step_pme(mesh0, steady, 3.0, 1e-2, fd)
    assert not isinstance(out, NonConvergence)
    np.testing.assert_allclose(out, steady, atol=1e-11)


def test_step_pme_linear_limit_matches_step_fp(two_cell_mesh):
    """A hand-built exponent-one residual reproduces the linear solver."""
    mesh = two_cell_mesh
    data = _two_cell_data(mesh)
    f_prev = np.array([0.7, 2.9])
    dt = 5e-3

    def residual(f):
        df = edge_differences(mesh, f, data.f_dirichlet)
        out = mesh.cell_area * (f - f_prev) / dt
        np.add.at(out, mesh.edge_cells[:, 0], -(mesh.tau * df))
        inter = mesh.interior
        np.add.at(out, mesh.edge_cells[inter, 1], (mesh.tau * df)[inter])
        return out

    def jacobian(f):
        h = 1e-8
        cols = []
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            cols.append((residual(f + e) - residual(f - e)) / (2 * h))
        dense = np.column_stack(cols)
        rows, colids = np.nonzero(dense)
        return SparseMatrix.from_coo(2, rows, colids, dense[rows, colids])

    got = newton_solve(residual, jacobian, f_prev, NewtonConfig())[0]
    expected = step_fp(mesh, data, SCHARFETTER_GUMMEL, f_prev, dt)
    np.testing.assert_allclose(got, expected, atol=1e-10)


def test_step_pme_filling_first_step_structure():
    """Mass enters only through the Dirichlet boundary and the degenerate
    front stays near it after one small step."""
    prob = fill_problem(2)
    mesh = prob.mesh
    dt = 1e-3
    f1 = step_pme(mesh, prob.f0, prob.m, dt, prob.f_dirichlet)
    assert not isinstance(f1, NonConvergence)
    assert np.all(f1 >= 0)
    # finite propagation: cells far from the right edge stay empty
    far = mesh.geometry.cell_centroid[:, 0] < 0.5
    assert np.max(f1[far]) < 1e-12
    # the filled region touches the Dirichlet column
    dirichlet_cells = mesh.edge_cells[mesh.dirichlet, 0]
    assert np.min(f1[dirichlet_cells]) > 0.1
    # exact mass balance with the boundary flux of the new state
    g_dir = np.where(np.isfinite(prob.f_dirichlet),
                     prob.f_dirichlet ** prob.m, np.nan)
    dg = edge_differences(mesh, signed_power(f1, prob.m), g_dir)
    influx = float(np.sum((mesh.tau * dg)[mesh.dirichlet]))
    assert np.sum(mesh.cell_area * f1) == pytest.approx(dt * influx, rel=1e-12)


# ---------------------------------------------------------------------------
# drift-diffusion


def _flat_dd(mesh):
    dmask = mesh.dirichlet
    ones_d = np.where(dmask, 1.0, np.nan)
    zeros_d = np.where(dmask, 0.0, np.nan)
    return DdData(doping=np.zeros(mesh.n_cells), debye=1.0, n_dirichlet=ones_d,
                  p_dirichlet=ones_d, v_dirichlet=zeros_d)


def test_dd_thermal_flat_constants(mesh0):
    state = solve_dd_thermal(mesh0, _flat_dd(mesh0), 0.0, 0.0)
    np.testing.assert_allclose(state.v, 0.0, atol=1e-12)
    np.testing.assert_allclose(state.n, 1.0, atol=1e-12)
    np.testing.assert_allclose(state.p, 1.0, atol=1e-12)


def test_dd_thermal_rejects_incompatible_offsets(mesh0):
    with pytest.raises(SolverError):
        solve_dd_thermal(mesh0, _flat_dd(mesh0), 0.3, 0.0)
    biased = pn_problem(0, bias=2.5)
    assert dd_equilibrium_offsets(biased.mesh, biased.dd) is None
    with pytest.raises(SolverError):
        solve_dd_thermal(biased.mesh, biased.dd, 0.0, 0.0)


def test_dd_thermal_pn_junction_identities():
    prob = pn_problem(1)
    state = solve_dd_thermal(prob.mesh, prob.dd, 0.0, 0.0)
    np.testing.assert_allclose(np.log(state.n) - state.v, 0.0, atol=1e-11)
    np.testing.assert_allclose(np.log(state.p) + state.v, 0.0, atol=1e-11)


def test_dd_thermal_jacobian_spd(mesh0):
    from entrofv.schemes import assemble_poisson
    dd = _flat_dd(mesh0)
    a_mat = assemble_poisson(mesh0, dd.debye)
    jac = a_mat.add_diagonal(mesh0.cell_area * 2.0)  # exp terms at v = 0
    dense = jac.toarray()
    np.testing.assert_allclose(dense, dense.T, atol=1e-13)
    assert np.all(np.linalg.eigvalsh(dense) > 0)


def test_dd_steady_flat_constants(mesh0):
    for scheme in SCHEMES.values():
        state = solve_dd_steady(mesh0, _flat_dd(mesh0), scheme)
        np.testing.assert_allclose(state.n, 1.0, atol=1e-12)
        np.testing.assert_allclose(state.p, 1.0, atol=1e-12)
        np.testing.assert_allclose(state.v, 0.0, atol=1e-12)


def test_dd_steady_sg_matches_thermal():
    prob = pn_problem(1)
    thermal = solve_dd_thermal(prob.mesh, prob.dd, 0.0, 0.0)
    steady = solve_dd_steady(prob.mesh, prob.dd, SCHARFETTER_GUMMEL)
    assert np.max(np.abs(steady.n - thermal.n)) < 1e-9
    assert np.max(np.abs(steady.p - thermal.p)) < 1e-9
    assert np.max(np.abs(steady.v - thermal.v)) < 1e-9


def test_dd_steady_upwind_breaks_thermal_identity():
    prob = pn_problem(2)
    steady = solve_dd_steady(prob.mesh, prob.dd, UPWIND)
    assert np.max(np.abs(np.log(steady.n) - steady.v)) > 1e-6


def test_step_dd_fixed_point_and_charge_identity():
    prob = pn_problem(1)
    mesh, dd = prob.mesh, prob.dd
    steady = solve_dd_steady(mesh, dd, SCHARFETTER_GUMMEL)
    out = step_dd(mesh, dd, SCHARFETTER_GUMMEL, steady, 1e-2)
    assert not isinstance(out, NonConvergence)
    assert np.max(np.abs(out.n - steady.n)) < 1e-9

    v0 = solve_dd_poisson(mesh, dd, prob.n0, prob.p0)
    first = step_dd(mesh, dd, SCHARFETTER_GUMMEL,
                    DdState(n=prob.n0, p=prob.p0, v=v0), 1e-2)
    assert not isinstance(first, NonConvergence)
    assert np.all(first.n > 0) and np.all(first.p > 0)
    # discrete Gauss law: net charge balances the boundary potential flux
    dmask = mesh.dirichlet
    v_cell = first.v[mesh.edge_cells[:, 0]]
    boundary_flux = np.sum(mesh.tau[dmask] * (dd.v_dirichlet[dmask] - v_cell[dmask]))
    charge = np.sum(mesh.cell_area * (first.p - first.n + dd.doping))
    assert charge + dd.debye ** 2 * boundary_flux == pytest.approx(0.0, abs=1e-10)


def test_dd_steady_with_bias_converges():
    prob = pn_problem(0, bias=2.5)
    for scheme in SCHEMES.values():
        state = solve_dd_steady(prob.mesh, prob.dd, scheme)
        assert np.all(state.n > 0) and np.all(state.p > 0)


# ---------------------------------------------------------------------------
# adaptive driver


def test_adaptive_loop_growth_sequence():
    cfg = StepperConfig(t_final=0.1, dt0=1e-3)
    seen = []

    def try_step(state, dt):
        return state

    def record(t, dt, state):
        seen.append(dt)
        return {"t": t, "dt": dt}

    adaptive_time_loop(0.0, cfg, try_step, record)
    expected = [min(1e-2, 1e-3 * 2 ** k) for k in range(8)]
    np.testing.assert_allclose(seen[:8], expected, rtol=1e-12)


def test_adaptive_loop_halves_once_on_failure():
    cfg = StepperConfig(t_final=0.01, dt0=1e-3)
    attempts = []

    def try_step(state, dt):
        attempts.append(dt)
        if len(attempts) == 1:
            return NonConvergence(iterations=1, residual_norm=1.0,
                                  last_iterate=np.zeros(1))
        return state

    accepted = []

    def record(t, dt, state):
        accepted.append(dt)
        return {"t": t, "dt": dt}

    adaptive_time_loop(0.0, cfg, try_step, record)
    assert attempts[0] == pytest.approx(1e-3)
    assert attempts[1] == pytest.approx(5e-4)
    assert accepted[0] == pytest.approx(5e-4)
    # next proposal doubles from the accepted step
    assert attempts[2] == pytest.approx(1e-3)


def test_adaptive_loop_aborts_below_dt_min():
    cfg = StepperConfig(t_final=1.0, dt0=1e-3, dt_min=2.5e-4)

    def always_fail(state, dt):
        return NonConvergence(iterations=1, residual_norm=1.0,
                              last_iterate=np.zeros(1))

    state, t, abort = adaptive_time_loop(0.0, cfg, always_fail,
                                         lambda t, dt, s: {"t": t, "dt": dt})
    assert abort is not None
    assert t == 0.0


def test_stepper_config_validation():
    with pytest.raises(ValueError):
        StepperConfig(t_final=1.0, dt0=1.0, dt_max=0.5)
    with pytest.raises(ValueError):
        StepperConfig(t_final=1.0, grow=1.0)
    with pytest.raises(ValueError):
        StepperConfig(t_final=-1.0)


def test_run_transient_fp_records_expected_columns():
    prob = toy_problem(0)
    cfg = StepperConfig.fixed(1e-2, 0.05)
    result = run_transient(prob, UPWIND, cfg)
    trace = result.trace
    assert trace.columns == ("t", "dt", "H_phi1", "H_phi2", "D_phi2", "L1", "L2")
    assert len(trace) == 6
    assert trace.column("t")[0] == 0.0
    assert not result.aborted
    # primary entropy decays monotonically
    h2 = trace.column("H_phi2")
    assert np.all(np.diff(h2) <= 1e-12 * h2[0])


def test_run_transient_stops_at_entropy_floor():
    prob = toy_problem(0)
    cfg = StepperConfig.fixed(1e-2, 50.0, entropy_floor=1e-6)
    result = run_transient(prob, SCHARFETTER_GUMMEL, cfg)
    assert result.trace.last("t") < 50.0
    assert not result.aborted
    h2 = result.trace.column("H_phi2")
    assert h2[-1] < 1e-6 * h2[0]
    assert h2[-2] >= 1e-6 * h2[0]


def test_fitted_rate_dominates_theoretical_bound():
    # the guaranteed 2-entropy rate is conservative: the fit must beat it
    from entrofv.entropy import (DEFAULT_POINCARE, fit_decay_rate,
                                 theoretical_rate_fp)
    from entrofv.schemes import b_coefficients
    prob = toy_problem(1)
    mesh, data = prob.mesh, prob.data
    cfg = StepperConfig.fixed(1e-2, 0.8, entropy_floor=1e-32)
    for scheme in SCHEMES.values():
        result = run_transient(prob, scheme, cfg)
        t = result.trace.column("t")
        fit = fit_decay_rate(result.trace, "H_phi2", (0.1, 0.6))
        bm, bp = b_coefficients(mesh, data, scheme)
        active = ~mesh.neumann
        beta = float(min(bm[active].min(), bp[active].min()))
        bound = theoretical_rate_fp(float(data.a_edge.min()),
                                    float(result.steady.min()),
                                    float(result.steady.max()),
                                    beta, mesh.xi, DEFAULT_POINCARE, 1e-2)
        assert fit.rate >= bound


def test_run_transient_pme_and_dd_columns():
    pme = sweep_problem(0, 2.0, 1.0)
    res = run_transient(pme, SCHARFETTER_GUMMEL, StepperConfig(t_final=0.01))
    assert res.trace.columns == ("t", "dt", "N_m", "D_m", "Lmp1")

    dd = pn_problem(0)
    res = run_transient(dd, SCHARFETTER_GUMMEL, StepperConfig.fixed(1e-2, 0.03))
    assert res.trace.columns == ("t", "dt", "E_inf", "E_eq")
    assert np.all(np.isfinite(res.trace.column("E_eq")))

    biased = pn_problem(0, bias=1.0)
    res = run_transient(biased, SCHARFETTER_GUMMEL, StepperConfig.fixed(1e-2, 0.03))
    assert np.all(np.isnan(res.trace.column("E_eq")))
    assert np.all(np.isfinite(res.trace.column("E_inf")))
