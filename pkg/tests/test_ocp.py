import dataclasses

import numpy as np
import pytest

from mortensen.adjoint import control_inner, control_norm
from mortensen.discretization import EnergyState, energy_norm, energy_norm_stacked
from mortensen.dynamics import ControlSignal, OutputSignal
from mortensen.errors import TrustRegionError
from mortensen.harness import simulate
from mortensen.ocp import (
    absolute_cost,
    adjoint_gradient,
    cost,
    hjb_residual,
    solve_ocp,
    value,
    value_gradient,
    value_hessian,
    value_hessian_apply,
)

from conftest import make_scenario


def _zero_output(sc, k):
    return OutputSignal(sc.tgrid.prefix(k), np.zeros((k + 1, sc.meas.output_dim)))


def test_cost_on_nominal_is_zero(disturbed_cubic_scenario):
    sc = disturbed_cubic_scenario
    k = sc.tgrid.steps
    data = sc.ocp_data(k, EnergyState.zero(8), _zero_output(sc, k))
    nominal = sc.nominal()
    v0 = ControlSignal(sc.tgrid, np.zeros((k + 1, 8)))
    assert cost(nominal, v0, data) == 0.0


def test_cost_pure_tracking(disturbed_cubic_scenario):
    sc = disturbed_cubic_scenario
    k = sc.tgrid.steps
    rng = np.random.default_rng(0)
    y = OutputSignal(sc.tgrid, rng.standard_normal((k + 1, 3)))
    data = sc.ocp_data(k, EnergyState.zero(8), y)
    v0 = ControlSignal(sc.tgrid, np.zeros((k + 1, 8)))
    expected = 0.5 * sc.alpha * y.norm() ** 2
    assert cost(sc.nominal(), v0, data) == pytest.approx(expected, rel=1e-12)


def test_quadratic_scaling_linear_case(disturbed_linear_scenario):
    sc = disturbed_linear_scenario
    sim = simulate(sc)
    k = sc.tgrid.steps
    xi = sim.initial_error
    data1 = sc.ocp_data(k, xi, sim.y_rel)
    v1 = value(data1, tolerances=sc.tolerances)
    xi2 = EnergyState(2 * xi.displacement, 2 * xi.velocity)
    y2 = OutputSignal(sc.tgrid, 2 * sim.y_rel.values)
    data2 = sc.ocp_data(k, xi2, y2)
    v2 = value(data2, tolerances=sc.tolerances)
    assert v2 == pytest.approx(4 * v1, rel=1e-8)


def test_adjoint_gradient_zero_data(disturbed_cubic_scenario):
    # the nominal pair is the unconstrained minimum; residual roundoff only
    sc = disturbed_cubic_scenario
    k = sc.tgrid.steps
    data = sc.ocp_data(k, EnergyState.zero(8), _zero_output(sc, k))
    grad, w, p = adjoint_gradient(ControlSignal(sc.tgrid, np.zeros((k + 1, 8))), data)
    assert np.max(np.abs(grad.values)) <= 1e-12
    assert np.max(np.abs(w.states - sc.nominal().states)) <= 1e-12
    assert np.max(np.abs(p.values)) <= 1e-12


def test_adjoint_gradient_duality(disturbed_cubic_scenario):
    sc = disturbed_cubic_scenario
    sim = simulate(sc)
    k = sc.tgrid.steps
    rng = np.random.default_rng(1)
    v = ControlSignal(sc.tgrid, 0.02 * rng.standard_normal((k + 1, 8)))
    data = sc.ocp_data(k, sim.initial_error, sim.y_rel)
    grad, w, p = adjoint_gradient(v, data)
    np.testing.assert_allclose(grad.values, v.values + p.values, rtol=1e-13)
    prob = data.problem()
    h = rng.standard_normal(v.values.shape)
    eps = 1e-5
    xi = data.xi.stacked()
    fd = (
        prob.cost_only(v.values + eps * h, xi) - prob.cost_only(v.values - eps * h, xi)
    ) / (2 * eps)
    an = control_inner(grad.values, h, prob.weights)
    assert abs(fd - an) / abs(an) <= 1e-6


def test_adjoint_gradient_affine_in_v_linear_case(disturbed_linear_scenario):
    sc = disturbed_linear_scenario
    sim = simulate(sc)
    k = sc.tgrid.steps
    data = sc.ocp_data(k, sim.initial_error, sim.y_rel)
    rng = np.random.default_rng(2)
    v1 = ControlSignal(sc.tgrid, 0.02 * rng.standard_normal((k + 1, 8)))
    v2 = ControlSignal(sc.tgrid, 0.02 * rng.standard_normal((k + 1, 8)))
    v12 = ControlSignal(sc.tgrid, v1.values + v2.values)
    v0 = ControlSignal(sc.tgrid, np.zeros((k + 1, 8)))
    g1, _, _ = adjoint_gradient(v1, data)
    g2, _, _ = adjoint_gradient(v2, data)
    g12, _, _ = adjoint_gradient(v12, data)
    g0, _, _ = adjoint_gradient(v0, data)
    residual = g12.values - g1.values - g2.values + g0.values
    assert np.max(np.abs(residual)) <= 1e-12


def test_solve_ocp_zero_data(disturbed_cubic_scenario):
    sc = disturbed_cubic_scenario
    k = sc.tgrid.steps
    data = sc.ocp_data(k, EnergyState.zero(8), _zero_output(sc, k))
    sol = solve_ocp(data, tolerances=sc.tolerances)
    assert sol.iterations <= 1
    assert sol.value <= 1e-25
    assert np.all(sol.v_star.values == 0)
    assert np.max(np.abs(sol.w_star.states - sc.nominal().states)) <= 1e-12


def test_solve_ocp_optimality(disturbed_cubic_scenario):
    sc = disturbed_cubic_scenario
    sim = simulate(sc)
    k = sc.tgrid.steps
    data = sc.ocp_data(k, sim.initial_error, sim.y_rel)
    sol = solve_ocp(data, tol=1e-9, tolerances=sc.tolerances)
    prob = data.problem()
    resid = control_norm(sol.v_star.values + sol.p_star.values, prob.weights)
    assert resid <= 1e-8
    assert sol.value >= 0


def test_solve_ocp_matches_dense_lq(small_meas):
    # assemble the reduced quadratic explicitly at small size and compare
    sc = make_scenario(mode_count=4, t_final=0.1, dt=2e-3, cubic_on=False,
                       measurement={"kind": "low_modes", "count": 2})
    rng = np.random.default_rng(3)
    k = sc.tgrid.steps
    n = 4
    xi = EnergyState.from_stacked(0.05 * rng.standard_normal(2 * n))
    y = OutputSignal(sc.tgrid, 0.05 * rng.standard_normal((k + 1, 2)))
    data = sc.ocp_data(k, xi, y)
    prob = data.problem()
    dim = (k + 1) * n
    zero_cache = prob.run(np.zeros((k + 1, n)), xi.stacked())
    g0, _ = prob.gradient(zero_cache)
    # quadratic form assembled column by column through the exact products
    hess = np.empty((dim, dim))
    for j in range(dim):
        e = np.zeros(dim)
        e[j] = 1.0
        hv, _ = prob.hessian_product(
            zero_cache, e.reshape(k + 1, n), None, full_newton=False
        )
        hess[:, j] = hv.reshape(-1)
    # normal equations in the weighted inner product: W H v = -W g
    w_full = np.repeat(prob.weights, n)
    v_dense = np.linalg.solve(w_full[:, None] * hess, -(w_full * g0.reshape(-1)))
    sol = solve_ocp(data, tolerances=sc.tolerances)
    assert np.max(np.abs(sol.v_star.values.reshape(-1) - v_dense)) <= 1e-8


def test_estimator_beats_truth_energy(disturbed_cubic_scenario):
    # the optimum can only improve on the energy of the true disturbances
    sc = disturbed_cubic_scenario
    sim = simulate(sc)
    k = sc.tgrid.steps
    truth_offset = EnergyState.from_stacked(
        sim.truth.states[k] - sc.nominal().states[k]
    )
    data = sc.ocp_data(k, truth_offset, sim.y_rel)
    sol = solve_ocp(data, tolerances=sc.tolerances)
    truth_cost = cost(sim.truth, sim.control, data)
    assert sol.value <= truth_cost + 1e-12


def test_value_zero_and_time_zero(disturbed_cubic_scenario):
    sc = disturbed_cubic_scenario
    k = sc.tgrid.steps
    data = sc.ocp_data(k, EnergyState.zero(8), _zero_output(sc, k))
    assert value(data, tolerances=sc.tolerances) <= 1e-25
    grad = value_gradient(data, tolerances=sc.tolerances)
    assert energy_norm(grad, sc.grid) <= 1e-12
    rng = np.random.default_rng(4)
    xi = EnergyState.from_stacked(0.3 * rng.standard_normal(16))
    data0 = sc.ocp_data(0, xi, _zero_output(sc, 1))
    assert value(data0) == pytest.approx(0.5 * energy_norm(xi, sc.grid) ** 2, abs=1e-14)
    np.testing.assert_allclose(value_gradient(data0).stacked(), xi.stacked())
    direction = rng.standard_normal(16)
    np.testing.assert_allclose(value_hessian_apply(data0, direction), direction)
    hop = value_hessian(data0)
    np.testing.assert_allclose(hop.matrix, np.eye(16), atol=1e-10)


def test_value_gradient_and_hessian_fd(disturbed_cubic_scenario):
    sc = disturbed_cubic_scenario
    sim = simulate(sc)
    k = sc.tgrid.steps // 2
    rng = np.random.default_rng(5)
    xi0 = 0.3 * sim.initial_error.stacked()
    data = sc.ocp_data(k, EnergyState.from_stacked(xi0), sim.y_rel.prefix(k))
    sol = solve_ocp(data, tolerances=sc.tolerances)
    grad = value_gradient(data, solution=sol).stacked()
    eps = 1e-5
    worst_g = 0.0
    for _ in range(5):
        eta = rng.standard_normal(16)
        dp = dataclasses.replace(data, xi=EnergyState.from_stacked(xi0 + eps * eta))
        dm = dataclasses.replace(data, xi=EnergyState.from_stacked(xi0 - eps * eta))
        fd = (value(dp, tolerances=sc.tolerances) - value(dm, tolerances=sc.tolerances)) / (2 * eps)
        an = float(np.dot(sc.grid.gram * grad, eta))
        worst_g = max(worst_g, abs(fd - an) / abs(an))
    assert worst_g <= 1e-5
    eta = rng.standard_normal(16)
    hv = value_hessian_apply(data, eta, tolerances=sc.tolerances, solution=sol)
    dp = dataclasses.replace(data, xi=EnergyState.from_stacked(xi0 + eps * eta))
    dm = dataclasses.replace(data, xi=EnergyState.from_stacked(xi0 - eps * eta))
    gp = value_gradient(dp, tolerances=sc.tolerances).stacked()
    gm = value_gradient(dm, tolerances=sc.tolerances).stacked()
    fd_h = (gp - gm) / (2 * eps)
    rel = energy_norm_stacked(fd_h - hv, sc.grid) / energy_norm_stacked(hv, sc.grid)
    assert rel <= 1e-4


def test_value_hessian_symmetry(disturbed_cubic_scenario):
    sc = disturbed_cubic_scenario
    sim = simulate(sc)
    k = sc.tgrid.steps // 2
    data = sc.ocp_data(
        k,
        EnergyState.from_stacked(0.3 * sim.initial_error.stacked()),
        sim.y_rel.prefix(k),
    )
    hop = value_hessian(data, tolerances=sc.tolerances)
    s = hop.matrix * sc.grid.gram[:, None]
    asym = np.max(np.abs(s - s.T)) / np.max(np.abs(s))
    assert asym <= 1e-9
    assert hop.coercivity_margin > 0
    rng = np.random.default_rng(6)
    for _ in range(5):
        eta = rng.standard_normal(16)
        zeta = rng.standard_normal(16)
        lhs = float(np.dot(sc.grid.gram * (hop.matrix @ eta), zeta))
        rhs = float(np.dot(sc.grid.gram * (hop.matrix @ zeta), eta))
        assert abs(lhs - rhs) <= 1e-9 * np.max(np.abs(s))


def test_shift_identity(disturbed_cubic_scenario):
    # evaluating the cost against absolute measurements reproduces the
    # shifted value exactly (the shift is algebraic)
    sc = disturbed_cubic_scenario
    sim = simulate(sc)
    k = sc.tgrid.steps
    data = sc.ocp_data(k, sim.initial_error, sim.y_rel)
    sol = solve_ocp(data, tolerances=sc.tolerances)
    j_abs = absolute_cost(sol.w_star, sol.v_star, sim.y_abs, data)
    assert j_abs == pytest.approx(sol.value, abs=1e-10)


def test_information_monotonicity_linear_displacement():
    # along the measured displacement channel (linear case) the minimal
    # energy grows with the horizon; sampled scenario for the invariant
    sc = make_scenario(mode_count=8, t_final=0.5, dt=2e-3, cubic_on=False)
    xi = np.zeros(16)
    xi[0] = 0.05
    vals = []
    for k in (1, 50, 125, 250):
        data = sc.ocp_data(k, EnergyState.from_stacked(xi), _zero_output(sc, k))
        vals.append(value(data, tolerances=sc.tolerances))
    assert all(vals[i + 1] >= vals[i] - 1e-12 for i in range(len(vals) - 1))


def test_trust_region_rejection(disturbed_cubic_scenario):
    sc = disturbed_cubic_scenario
    k = sc.tgrid.steps
    big = EnergyState.from_stacked(np.full(16, 10.0))
    data = sc.ocp_data(k, big, _zero_output(sc, k))
    with pytest.raises(TrustRegionError):
        solve_ocp(data, tolerances=sc.tolerances)


def test_hjb_linear_small_data(disturbed_linear_scenario):
    sc = disturbed_linear_scenario
    sim = simulate(sc)
    k = sc.tgrid.steps // 2
    xi = np.zeros(16)
    xi[0] = 0.02
    xi[9] = 0.01
    data = sc.ocp_data(k, EnergyState.from_stacked(xi), sim.y_rel.prefix(k))
    res = hjb_residual(data, sc.tgrid.dt, sim.y_rel, tolerances=sc.tolerances)
    assert res <= 1e-3


def test_hjb_zero_data(disturbed_cubic_scenario):
    sc = disturbed_cubic_scenario
    k = sc.tgrid.steps // 2
    y0 = OutputSignal(sc.tgrid, np.zeros((sc.tgrid.steps + 1, 3)))
    data = sc.ocp_data(k, EnergyState.zero(8), y0.prefix(k))
    res = hjb_residual(data, sc.tgrid.dt, y0, tolerances=sc.tolerances)
    assert res <= 1e-5  # quadratic remainder of the nominal drift only
