"""Minimum-energy observer for a disturbed cubic wave equation."""

from .discretization import (
    EnergyState,
    MeasurementOp,
    SpectralGrid,
    energy_inner,
    energy_norm,
    group_action,
    low_mode_measurement,
    velocity_probe_measurement,
)
from .dynamics import (
    ControlSignal,
    OutputSignal,
    TimeGrid,
    Trajectory,
    nominal_trajectory,
    solve_backward,
    solve_forward,
    solve_linearized,
)
from .errors import (
    CoercivityLossError,
    DivergenceError,
    MortensenError,
    NonconvergenceError,
    TrustRegionError,
    ValidationError,
)
from .harness import Scenario, ScenarioConfig, SimulationResult, simulate
from .lqr_riccati import (
    GlqrData,
    HessianOperator,
    RiccatiSolution,
    invert_hessian,
    riccati_integral_residual,
    riccati_margins,
    riccati_nominal,
    solve_glqr,
)
from .observer import (
    ArgminEstimate,
    GainMode,
    KalmanRun,
    ObserverRun,
    argmin_estimator,
    compare,
    fixed_point_observer,
    kalman_bucy,
    kalman_bucy_run,
    run_observer,
)
from .ocp import (
    OcpData,
    OcpSolution,
    SolverTolerances,
    adjoint_gradient,
    cost,
    hjb_residual,
    solve_ocp,
    value,
    value_gradient,
    value_hessian,
    value_hessian_apply,
)

__version__ = "0.1.0"
