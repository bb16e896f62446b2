import json
import os

import numpy as np
import pytest

from mortensen.cli import main
from mortensen.discretization import energy_norm_stacked
from mortensen.dynamics import TimeGrid, Trajectory
from mortensen.errors import ValidationError
from mortensen.harness import (
    Scenario,
    ScenarioConfig,
    parse_override,
    read_trajectory_csv,
    simulate,
    write_trajectory_csv,
)

from conftest import make_scenario


def test_default_config_roundtrip():
    cfg = ScenarioConfig.from_dict({})
    again = ScenarioConfig.from_dict(cfg.to_dict())
    assert cfg == again


@pytest.mark.parametrize(
    "raw, fragment",
    [
        ({"mode_count": 0}, "mode_count"),
        ({"mode_count": "many"}, "mode_count"),
        ({"dt": 3e-4}, "dt"),
        ({"alpha": -1.0}, "alpha"),
        ({"dealias_factor": 1.2}, "dealias_factor"),
        ({"bogus_field": 1}, "bogus_field"),
        ({"measurement": {"kind": "sonar"}}, "measurement.kind"),
        ({"measurement": {"kind": "low_modes", "count": 99}}, "measurement.count"),
        ({"measurement": {"kind": "low_modes", "count": 2, "x": 1}}, "measurement.x"),
        ({"measurement": {"kind": "velocity_probe", "points": [9.0]}}, "measurement.points"),
        ({"disturbance": {"v": {"kind": "loud"}}}, "disturbance.v.kind"),
        (
            {"disturbance": {"v": {"kind": "smooth_random", "amplitude": -1}}},
            "disturbance.v.amplitude",
        ),
        ({"disturbance": {"eta": {"kind": "random"}}}, "disturbance.eta.amplitude"),
        ({"gain": {"kind": "magic"}}, "gain.kind"),
        ({"gain": {"kind": "full_hessian", "refresh_every": 0}}, "gain.refresh_every"),
        ({"tolerances": {"cg": -1.0}}, "tolerances.cg"),
        ({"tolerances": {"unknown_tol": 1.0}}, "tolerances.unknown_tol"),
        ({"initial_state": {"kind": "mode", "index": 99}}, "initial_state.index"),
        ({"trust_radius": 0.0}, "trust_radius"),
        ({"seed": 1.5}, "seed"),
    ],
)
def test_config_rejection_with_field_path(raw, fragment):
    base = {"mode_count": 8}
    base.update(raw)
    with pytest.raises(ValidationError) as err:
        ScenarioConfig.from_dict(base)
    assert fragment in str(err.value)


def test_override_parsing_and_application():
    key, val = parse_override("alpha=2.5")
    assert key == "alpha" and val == 2.5
    key, val = parse_override('measurement.kind="low_modes"')
    assert val == "low_modes"
    cfg = ScenarioConfig.from_dict({}).override("measurement.count", 2)
    assert cfg.measurement["count"] == 2
    with pytest.raises(ValidationError):
        parse_override("no_equals_sign")
    with pytest.raises(ValidationError):
        ScenarioConfig.from_dict({}).override("nope.nope", 1)


def test_simulate_zero_disturbances_is_nominal():
    sc = make_scenario()
    sim = simulate(sc)
    np.testing.assert_array_equal(sim.truth.states, sc.nominal().states)
    assert np.all(sim.y_rel.values == 0)


def test_simulate_initial_error_unitary_propagation():
    # linear dynamics propagate the initial error isometrically
    amp = 0.07
    sc = make_scenario(
        cubic_on=False,
        seed=9,
        disturbance={"eta": {"kind": "random", "amplitude": amp}},
    )
    sim = simulate(sc)
    errs = energy_norm_stacked((sim.truth.states - sc.nominal().states).T, sc.grid)
    np.testing.assert_allclose(errs, amp, rtol=1e-12)


def test_seed_determinism_byte_identical(tmp_path):
    cfg = {
        "mode_count": 8,
        "t_final": 0.25,
        "dt": 2e-3,
        "measurement": {"kind": "low_modes", "count": 3},
        "seed": 77,
        "disturbance": {
            "v": {"kind": "smooth_random", "amplitude": 0.05},
            "eta": {"kind": "random", "amplitude": 0.05},
            "mu": {"kind": "random", "amplitude": 0.01},
        },
    }
    payloads = []
    for run in range(2):
        sc = Scenario(ScenarioConfig.from_dict(cfg))
        sim = simulate(sc)
        path = tmp_path / f"truth_{run}.csv"
        write_trajectory_csv(str(path), sim.truth)
        payloads.append(path.read_bytes())
    assert payloads[0] == payloads[1]


def test_csv_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    tg = TimeGrid(0.02, 1e-3)
    traj = Trajectory(tg, rng.standard_normal((tg.steps + 1, 8)))
    path = tmp_path / "traj.csv"
    write_trajectory_csv(str(path), traj)
    back = read_trajectory_csv(str(path))
    assert np.array_equal(back.states, traj.states)
    assert np.array_equal(back.grid.times, traj.grid.times)
    raw = path.read_bytes()
    assert b"\r" not in raw  # LF line endings


def _write_cfg(tmp_path, payload):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(payload))
    return str(path)


SMALL_CFG = {
    "mode_count": 6,
    "t_final": 0.2,
    "dt": 2e-3,
    "measurement": {"kind": "low_modes", "count": 2},
    "argmin_samples": 2,
    "disturbance": {
        "v": {"kind": "smooth_random", "amplitude": 0.04},
        "eta": {"kind": "random", "amplitude": 0.04},
        "mu": {"kind": "random", "amplitude": 0.008},
    },
    "seed": 5,
}


def test_cli_simulate_and_determinism(tmp_path):
    cfg_path = _write_cfg(tmp_path, SMALL_CFG)
    out1 = str(tmp_path / "run1")
    out2 = str(tmp_path / "run2")
    assert main(["simulate", "--config", cfg_path, "--out", out1, "--quiet"]) == 0
    assert main(["simulate", "--config", cfg_path, "--out", out2, "--quiet"]) == 0
    with open(os.path.join(out1, "truth.csv"), "rb") as fh:
        first = fh.read()
    with open(os.path.join(out2, "truth.csv"), "rb") as fh:
        second = fh.read()
    assert first == second
    with open(os.path.join(out1, "metrics.json")) as fh:
        metrics = json.load(fh)
    assert metrics["schema_version"] == 1


def test_cli_observe_zero_measurements(tmp_path):
    cfg = dict(SMALL_CFG)
    cfg["disturbance"] = {
        "v": {"kind": "zero"},
        "eta": {"kind": "zero"},
        "mu": {"kind": "zero"},
    }
    cfg_path = _write_cfg(tmp_path, cfg)
    out = str(tmp_path / "obs")
    assert main(["observe", "--config", cfg_path, "--out", out, "--quiet"]) == 0
    shifted = read_trajectory_csv(os.path.join(out, "observer_shifted.csv"))
    assert np.all(shifted.states == 0)


def test_cli_estimate_and_compare_and_riccati(tmp_path):
    cfg_path = _write_cfg(tmp_path, SMALL_CFG)
    for cmd in ("estimate-argmin", "riccati", "gradcheck", "compare"):
        out = str(tmp_path / cmd)
        assert main([cmd, "--config", cfg_path, "--out", out, "--quiet"]) == 0
        assert os.path.exists(os.path.join(out, "metrics.json"))


def test_cli_exit_codes(tmp_path):
    bad_cfg = _write_cfg(tmp_path, {"mode_count": -2})
    assert main(["simulate", "--config", bad_cfg, "--out", str(tmp_path / "x"), "--quiet"]) == 2

    # data outside the trust region -> solver refusal (exit 3)
    big = dict(SMALL_CFG)
    big["trust_radius"] = 1e-6
    cfg_path = _write_cfg(tmp_path, big)
    assert main(
        ["estimate-argmin", "--config", cfg_path, "--out", str(tmp_path / "y"), "--quiet"]
    ) == 3

    # impossible margin floor -> coercivity loss (exit 4)
    floor = dict(SMALL_CFG)
    floor["tolerances"] = {"margin_floor": 10.0}
    cfg_path = _write_cfg(tmp_path, floor)
    assert main(
        ["observe", "--config", cfg_path, "--out", str(tmp_path / "z"), "--quiet"]
    ) == 4


def test_cli_override_and_seed(tmp_path):
    cfg_path = _write_cfg(tmp_path, SMALL_CFG)
    out = str(tmp_path / "ov")
    code = main(
        [
            "simulate",
            "--config",
            cfg_path,
            "--out",
            out,
            "--seed",
            "123",
            "--override",
            "alpha=2.0",
            "--quiet",
        ]
    )
    assert code == 0
    with open(os.path.join(out, "metrics.json")) as fh:
        metrics = json.load(fh)
    assert metrics["config"]["alpha"] == 2.0
    assert metrics["config"]["seed"] == 123


def test_threads_env_var_is_deterministic(tmp_path, monkeypatch):
    sc = make_scenario(
        seed=13,
        disturbance={"eta": {"kind": "random", "amplitude": 0.04}},
    )
    sim = simulate(sc)
    k = sc.tgrid.steps // 2
    data = sc.ocp_data(k, sim.initial_error, sim.y_rel.prefix(k))
    from mortensen.ocp import value_hessian

    monkeypatch.setenv("MORTENSEN_THREADS", "1")
    h1 = value_hessian(data, tolerances=sc.tolerances)
    monkeypatch.setenv("MORTENSEN_THREADS", "3")
    h3 = value_hessian(data, tolerances=sc.tolerances)
    assert np.array_equal(h1.matrix, h3.matrix)
