import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from mortensen.discretization import energy_norm_stacked
from mortensen.dynamics import OutputSignal
from mortensen.errors import CoercivityLossError, ValidationError
from mortensen.harness import Scenario, ScenarioConfig, simulate
from mortensen.observer import (
    GainMode,
    argmin_estimator,
    compare,
    fixed_point_observer,
    kalman_bucy,
    kalman_bucy_run,
    run_observer,
)

from conftest import make_scenario


def _zero_y(sc):
    return OutputSignal(sc.tgrid, np.zeros((sc.tgrid.steps + 1, sc.meas.output_dim)))


def test_gain_mode_validation():
    with pytest.raises(ValidationError):
        GainMode("bogus")
    with pytest.raises(ValidationError):
        GainMode("full_hessian", refresh_every=0)


def test_zero_input_fixed_points():
    sc = make_scenario()
    y0 = _zero_y(sc)
    run = run_observer(y0, GainMode("riccati_nominal"), sc)
    assert np.all(run.shifted.states == 0)
    np.testing.assert_array_equal(run.absolute.states, sc.nominal().states)
    fp = fixed_point_observer(y0, sc)
    assert np.all(fp.shifted.states == 0)
    assert fp.iterations <= 1
    est = argmin_estimator(y0, [0, sc.tgrid.steps], sc)
    assert np.max(np.abs(est.shifted_states)) <= 1e-12
    kb = kalman_bucy(y0, sc)
    np.testing.assert_allclose(kb.states, sc.nominal().states, atol=1e-12)


def test_shift_consistency(disturbed_cubic_scenario):
    sc = disturbed_cubic_scenario
    sim = simulate(sc)
    run = run_observer(sim.y_rel, GainMode("riccati_nominal"), sc)
    # bookkeeping identity: the absolute rows are literally nominal + shifted
    assert np.array_equal(
        run.absolute.states, sc.nominal().states + run.shifted.states
    )
    assert np.all(run.gain_margins > 0)


def test_linear_case_four_way_agreement(disturbed_linear_scenario):
    sc = disturbed_linear_scenario
    sim = simulate(sc)
    idx = np.arange(sc.tgrid.steps + 1)
    run = run_observer(sim.y_rel, GainMode("riccati_nominal"), sc)
    fp = fixed_point_observer(sim.y_rel, sc)
    kb = kalman_bucy(sim.y_rel, sc)
    samples = [0, sc.tgrid.steps // 2, sc.tgrid.steps]
    est = argmin_estimator(sim.y_rel, samples, sc)
    rep = compare(
        {
            "observer": (idx, run.absolute.states),
            "fixed_point": (idx, fp.absolute.states),
            "kalman": (idx, kb.states),
            "argmin": (est.indices, est.absolute_states),
        },
        sim.truth,
        sc.grid,
    )
    assert max(rep["pairwise_discrepancy"].values()) <= 1e-5


def test_observer_contracts_initial_error():
    # noise-free nonlinear truth driven only by an initial-state error
    sc = make_scenario(
        cubic_on=True,
        seed=7,
        disturbance={
            "v": {"kind": "zero"},
            "eta": {"kind": "random", "amplitude": 0.05},
            "mu": {"kind": "zero"},
        },
    )
    sim = simulate(sc)
    run = run_observer(sim.y_rel, GainMode("riccati_nominal"), sc)
    err0 = energy_norm_stacked(run.absolute.states[0] - sim.truth.states[0], sc.grid)
    err_t = energy_norm_stacked(run.absolute.states[-1] - sim.truth.states[-1], sc.grid)
    assert err_t < err0


def test_argmin_time_zero_regardless_of_y(disturbed_cubic_scenario):
    sc = disturbed_cubic_scenario
    sim = simulate(sc)
    est = argmin_estimator(sim.y_rel, [0], sc)
    assert np.all(est.shifted_states[0] == 0)


def test_kalman_scalar_closed_form():
    # N = 1: compare against a tightly-integrated reference of the same ODE
    cfg = ScenarioConfig.from_dict(
        {
            "mode_count": 1,
            "t_final": 0.5,
            "dt": 1.25e-4,
            "cubic_on": False,
            "measurement": {"kind": "low_modes", "count": 1},
            "initial_state": {"kind": "mode", "index": 1, "amplitude": 1.0},
            "alpha": 2.0,
        }
    )
    sc = Scenario(cfg)
    times = sc.tgrid.times
    y_vals = (0.03 * np.sin(3.0 * times))[:, None]
    y = OutputSignal(sc.tgrid, y_vals)
    run = kalman_bucy_run(y, sc)

    lam = sc.grid.eigenvalues[0]
    alpha = sc.alpha
    c_row = sc.meas.matrix[0]

    def rhs(t, z):
        e = z[:2]
        s = z[2:].reshape(2, 2)
        a_mat = np.array([[0.0, 1.0], [-lam, 0.0]])
        gram = np.array([lam, 1.0])
        csharp = c_row / gram
        innov = 0.03 * math.sin(3.0 * t) - c_row @ e
        de = a_mat @ e + alpha * s @ (csharp * innov)
        sharp = lambda m: (m.T * gram[None, :]) / gram[:, None]
        bb = np.diag([0.0, 1.0])
        ds = a_mat @ s + s @ sharp(a_mat) + bb - alpha * s @ np.outer(csharp, c_row) @ s
        return np.concatenate([de, ds.reshape(-1)])

    z0 = np.concatenate([np.zeros(2), np.eye(2).reshape(-1)])
    ref = solve_ivp(rhs, (0, sc.tgrid.t_final), z0, rtol=1e-12, atol=1e-14,
                    t_eval=[sc.tgrid.t_final])
    e_ref = ref.y[:2, -1]
    shifted = run.estimate.states[-1] - sc.nominal().states[-1]
    assert np.max(np.abs(shifted - e_ref)) <= 1e-8
    sigma_ref = ref.y[2:, -1].reshape(2, 2)
    assert np.max(np.abs(run.covariances[-1] - sigma_ref)) <= 1e-8


def test_kalman_information_duality():
    # filter covariance inverse equals the value Hessian along the nominal
    sc = make_scenario(cubic_on=False)
    y0 = _zero_y(sc)
    run = kalman_bucy_run(y0, sc)
    ricc = sc.riccati()
    for k in (sc.tgrid.steps // 2, sc.tgrid.steps):
        lam_inv = np.linalg.inv(run.covariances[k])
        hess = ricc.hessian_at_horizon(k)
        rel = np.max(np.abs(lam_inv - hess)) / np.max(np.abs(hess))
        assert rel <= 1e-4


def test_gain_mode_first_order_consistency():
    # riccati gain and refreshed full hessian agree to first order in y:
    # the discrepancy shrinks at least linearly when the data are halved
    # (the exact ratio tends to 1/2 from above as the quadratic correction
    # dies out, hence the tolerance on the factor)
    gaps = []
    for amp in (0.02, 0.01):
        sc = make_scenario(
            mode_count=4,
            t_final=0.25,
            dt=5e-3,
            measurement={"kind": "low_modes", "count": 2},
            seed=11,
            disturbance={
                "v": {"kind": "zero"},
                "eta": {"kind": "random", "amplitude": amp},
                "mu": {"kind": "zero"},
            },
        )
        sim = simulate(sc)
        run_r = run_observer(sim.y_rel, GainMode("riccati_nominal"), sc)
        run_f = run_observer(sim.y_rel, GainMode("full_hessian", refresh_every=1), sc)
        gap = energy_norm_stacked((run_r.absolute.states - run_f.absolute.states).T, sc.grid)
        gaps.append(float(np.max(gap)))
    assert gaps[1] <= 0.6 * gaps[0]


def test_fixed_point_iteration_budget(disturbed_linear_scenario):
    sc = disturbed_linear_scenario
    sim = simulate(sc)
    assert sim.y_rel.norm() < sc.trust_radius / 2
    fp = fixed_point_observer(sim.y_rel, sc)
    assert fp.iterations <= 20


def test_compare_identity_and_errors(disturbed_cubic_scenario):
    sc = disturbed_cubic_scenario
    sim = simulate(sc)
    idx = np.arange(sc.tgrid.steps + 1)
    rep = compare(
        {"a": (idx, sim.truth.states), "b": (idx, sim.truth.states)},
        sim.truth,
        sc.grid,
    )
    assert rep["pairwise_discrepancy"]["a|b"] == 0.0
    assert rep["terminal_errors"]["a"] == 0.0
    with pytest.raises(ValidationError):
        compare({"a": (np.array([10**6]), sim.truth.states[:1])}, sim.truth, sc.grid)


def test_coercivity_loss_aborts():
    sc = make_scenario(tolerances={"margin_floor": 10.0})
    sim = simulate(sc)
    with pytest.raises(CoercivityLossError):
        run_observer(_zero_y(sc), GainMode("riccati_nominal"), sc)
