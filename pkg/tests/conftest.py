import numpy as np
import pytest

from mortensen.discretization import (
    EnergyState,
    SpectralGrid,
    low_mode_measurement,
)
from mortensen.dynamics import TimeGrid, solve_forward
from mortensen.harness import Scenario, ScenarioConfig


@pytest.fixture(scope="session")
def small_grid():
    return SpectralGrid(8)


@pytest.fixture(scope="session")
def small_tgrid():
    return TimeGrid(0.5, 2e-3)


@pytest.fixture(scope="session")
def small_w0(small_grid):
    a = np.zeros(small_grid.mode_count)
    a[0] = np.sqrt(np.pi / 2)  # u0 = sin x
    return EnergyState(a, np.zeros(small_grid.mode_count))


@pytest.fixture(scope="session")
def small_nominal(small_grid, small_tgrid, small_w0):
    return solve_forward(small_w0, None, small_tgrid, small_grid, cubic_on=True)


@pytest.fixture(scope="session")
def small_meas(small_grid):
    return low_mode_measurement(small_grid, 3)


def make_scenario(**overrides) -> Scenario:
    base = {
        "mode_count": 8,
        "t_final": 0.5,
        "dt": 2e-3,
        "measurement": {"kind": "low_modes", "count": 3},
    }
    base.update(overrides)
    return Scenario(ScenarioConfig.from_dict(base))


@pytest.fixture(scope="session")
def disturbed_linear_scenario():
    return make_scenario(
        cubic_on=False,
        seed=42,
        disturbance={
            "v": {"kind": "smooth_random", "amplitude": 0.05, "correlation_time": 0.1},
            "eta": {"kind": "random", "amplitude": 0.05},
            "mu": {"kind": "random", "amplitude": 0.01},
        },
    )


@pytest.fixture(scope="session")
def disturbed_cubic_scenario():
    return make_scenario(
        cubic_on=True,
        seed=43,
        disturbance={
            "v": {"kind": "smooth_random", "amplitude": 0.04, "correlation_time": 0.1},
            "eta": {"kind": "random", "amplitude": 0.04},
            "mu": {"kind": "random", "amplitude": 0.008},
        },
    )
