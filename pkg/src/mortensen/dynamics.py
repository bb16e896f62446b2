"""Time integration of the cubic wave equation and its linearizations.

One Strang-splitting integrator drives everything: the linear wave flow is
applied exactly through the mode-wise group action, and the cubic/source
terms enter as a velocity kick evaluated at the step midpoint.  Because both
sub-flows are exact and the composition is symmetric, the scheme is second
order, exactly energy-conserving in the linear case, and time-reversible;
backward (final-value) problems are solved by reversing time and negating
the velocity, which maps them onto the same forward loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .discretization import EnergyState, Rotation, SpectralGrid
from .errors import DivergenceError, ValidationError


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < ... < t_M = t_final."""

    t_final: float
    dt: float
    times: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.t_final <= 0 or self.dt <= 0:
            raise ValidationError("time grid: t_final and dt must be positive")
        steps = round(self.t_final / self.dt)
        if steps < 1 or abs(steps * self.dt - self.t_final) > 1e-9:
            raise ValidationError("time grid: dt must divide t_final (within 1e-9)")
        object.__setattr__(self, "times", np.arange(steps + 1) * self.dt)

    @property
    def steps(self) -> int:
        return self.times.shape[0] - 1

    def prefix(self, index: int) -> "TimeGrid":
        """The [0, t_index] sub-grid."""
        if not 1 <= index <= self.steps:
            raise ValidationError("time grid: prefix index out of range")
        return TimeGrid(index * self.dt, self.dt)

    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.steps + 1, self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        return w


@dataclass(frozen=True)
class Trajectory:
    """Time-gridded mild-solution samples, stored as stacked coefficients."""

    grid: TimeGrid
    states: np.ndarray  # (M+1, 2N)

    def __post_init__(self):
        if self.states.ndim != 2 or self.states.shape[0] != self.grid.steps + 1:
            raise ValidationError("trajectory: states must have one row per grid time")

    @property
    def mode_count(self) -> int:
        return self.states.shape[1] // 2

    def state(self, k: int) -> EnergyState:
        return EnergyState.from_stacked(self.states[k])

    def prefix(self, index: int) -> "Trajectory":
        return Trajectory(self.grid.prefix(index), self.states[: index + 1])


@dataclass(frozen=True)
class ControlSignal:
    """L2(0,t; L2)-valued disturbance sampled on the grid (coefficients)."""

    grid: TimeGrid
    values: np.ndarray  # (M+1, N)

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != self.grid.steps + 1:
            raise ValidationError("control signal: one value row per grid time required")
        if not np.isfinite(self.values).all():
            raise ValidationError("control signal: values must be finite")

    @staticmethod
    def zero(grid: TimeGrid, n: int) -> "ControlSignal":
        return ControlSignal(grid, np.zeros((grid.steps + 1, n)))

    def norm(self) -> float:
        w = self.grid.trapezoid_weights()
        return float(np.sqrt(np.sum(w * np.sum(self.values**2, axis=1))))

    def prefix(self, index: int) -> "ControlSignal":
        return ControlSignal(self.grid.prefix(index), self.values[: index + 1])


@dataclass(frozen=True)
class OutputSignal:
    """Y-valued signal sampled on the grid."""

    grid: TimeGrid
    values: np.ndarray  # (M+1, m)

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != self.grid.steps + 1:
            raise ValidationError("output signal: one value row per grid time required")
        if not np.isfinite(self.values).all():
            raise ValidationError("output signal: values must be finite")

    @staticmethod
    def zero(grid: TimeGrid, m: int) -> "OutputSignal":
        return OutputSignal(grid, np.zeros((grid.steps + 1, m)))

    def norm(self) -> float:
        w = self.grid.trapezoid_weights()
        return float(np.sqrt(np.sum(w * np.sum(self.values**2, axis=1))))

    def prefix(self, index: int) -> "OutputSignal":
        return OutputSignal(self.grid.prefix(index), self.values[: index + 1])


# -- core integrator ----------------------------------------------------------------


def strang_nonlinear_sweep(
    grid: SpectralGrid,
    tgrid: TimeGrid,
    x0: np.ndarray,
    v_nodes: np.ndarray | None,
    cubic_on: bool,
    keep_kick_states: bool = False,
):
    """March the split scheme: half rotation, velocity kick, half rotation.

    The kick at step j uses the node average (v_j + v_{j+1})/2 as the
    midpoint source.  Returns the (M+1, 2N) node states and, on request, the
    rotated displacement at every kick (needed to linearize the sweep).
    """
    n = grid.mode_count
    steps = tgrid.steps
    if cubic_on:
        grid.require_dealiased_cubic()
    rot = Rotation(grid, 0.5 * tgrid.dt)
    dt = tgrid.dt
    states = np.empty((steps + 1, 2 * n))
    states[0] = x0
    kick_disp = np.empty((steps, n)) if keep_kick_states else None
    x = x0.copy()
    for j in range(steps):
        x = rot.apply(x)
        if keep_kick_states:
            kick_disp[j] = x[:n]
        if cubic_on:
            x[n:] -= dt * grid.cubic(x[:n])
        if v_nodes is not None:
            x[n:] += (0.5 * dt) * (v_nodes[j] + v_nodes[j + 1])
        x = rot.apply(x)
        if not np.isfinite(x).all():
            raise DivergenceError(
                f"time stepping diverged (non-finite state) at step {j + 1}", step=j + 1
            )
        states[j + 1] = x
    return states, kick_disp


def strang_linear_sweep(
    grid: SpectralGrid,
    tgrid: TimeGrid,
    x0: np.ndarray,
    kick_disp: np.ndarray | None,
    source_mid: np.ndarray | None,
):
    """Tangent sweep along a stored base: kick is -3 u^2 z_1 plus sources.

    kick_disp[j] is the base displacement at the kick of step j (pass None
    for the linear equation without the coupling).  source_mid[j] is the
    midpoint value of any extra velocity source.  Batch-aware: x0 may be
    (2N,) or (2N, K).
    """
    n = grid.mode_count
    steps = tgrid.steps
    rot = Rotation(grid, 0.5 * tgrid.dt)
    dt = tgrid.dt
    states = np.empty((steps + 1,) + x0.shape)
    states[0] = x0
    x = x0.copy()
    for j in range(steps):
        x = rot.apply(x)
        if kick_disp is not None:
            x[n:] -= dt * grid.linearized_cubic(kick_disp[j], x[:n])
        if source_mid is not None:
            x[n:] += dt * source_mid[j]
        x = rot.apply(x)
        states[j + 1] = x
    return states


def flip_velocity(x: np.ndarray) -> np.ndarray:
    """Negate the velocity block of stacked coefficients (time reversal)."""
    out = x.copy()
    n = x.shape[0] // 2
    out[n:] = -out[n:]
    return out


# -- public solvers -----------------------------------------------------------------


def solve_forward(
    w0: EnergyState,
    v: ControlSignal | None,
    tgrid: TimeGrid,
    grid: SpectralGrid,
    cubic_on: bool = True,
) -> Trajectory:
    """Mild solution of the forward wave equation from an initial state."""
    if w0.mode_count != grid.mode_count:
        raise ValidationError("solve_forward: state/grid mode count mismatch")
    v_nodes = None
    if v is not None:
        if v.grid.steps != tgrid.steps:
            raise ValidationError("solve_forward: control grid mismatch")
        v_nodes = v.values
    states, _ = strang_nonlinear_sweep(grid, tgrid, w0.stacked(), v_nodes, cubic_on)
    return Trajectory(tgrid, states)


def solve_backward(
    final_state: EnergyState,
    v: ControlSignal | None,
    tgrid: TimeGrid,
    grid: SpectralGrid,
    cubic_on: bool = True,
) -> Trajectory:
    """Mild solution of the final-value problem on [0, t_final].

    final_state is the absolute state prescribed at t_final.  Implemented by
    time reversal: with the velocity negated, the reversed trajectory solves
    the forward equation, so one integrator serves both directions.
    """
    v_rev = None
    if v is not None:
        if v.grid.steps != tgrid.steps:
            raise ValidationError("solve_backward: control grid mismatch")
        v_rev = v.values[::-1]
    states, _ = strang_nonlinear_sweep(
        grid, tgrid, flip_velocity(final_state.stacked()), v_rev, cubic_on
    )
    out = states[::-1].copy()
    n = grid.mode_count
    out[:, n:] *= -1.0
    return Trajectory(tgrid, out)


def nominal_trajectory(
    w0: EnergyState, tgrid: TimeGrid, grid: SpectralGrid, cubic_on: bool = True
) -> Trajectory:
    """Undisturbed model trajectory (zero control, exact initial state)."""
    return solve_forward(w0, None, tgrid, grid, cubic_on)


def reversed_kick_displacements(base: Trajectory, grid: SpectralGrid) -> np.ndarray:
    """Base displacement at each kick of the reversed sweep behind `base`.

    The reversed sweep visits node states flip(base[M - j]); the kick state
    of step j is the first half-rotation of that node, so it is recoverable
    from the stored trajectory alone.  This makes linearizations exact
    tangents of the discrete solve, not merely consistent rediscretizations.
    """
    n = grid.mode_count
    rot = Rotation(grid, 0.5 * base.grid.dt)
    rev = base.states[::-1].copy()
    rev[:, n:] *= -1.0
    rotated = rot.apply(rev[:-1].T)
    return rotated[:n].T.copy()


def reversed_source_midpoints(values: np.ndarray) -> np.ndarray:
    """Node averages of a source, reordered for the reversed sweep."""
    mid = 0.5 * (values[:-1] + values[1:])
    return mid[::-1].copy()


def solve_linearized(
    base: Trajectory,
    grid: SpectralGrid,
    final_dir: EnergyState | None = None,
    control_dir: ControlSignal | None = None,
    source: ControlSignal | None = None,
    cubic_on: bool = True,
) -> Trajectory:
    """Linearization of the final-value solve around a base trajectory.

    Solves the backward linear equation with coupling -3 w_1^2 z_1, final
    value `final_dir`, control direction `control_dir` and extra velocity
    source `source`; this covers the first derivatives of the data-to-state
    map and, with source = -6 w_1 p_1 q_1, all of its second derivatives.
    The result is the exact tangent of the discrete backward solve.
    """
    tgrid = base.grid
    n = grid.mode_count
    if final_dir is None and control_dir is None and source is None:
        raise ValidationError("solve_linearized: at least one direction is required")
    src = np.zeros((tgrid.steps + 1, n))
    if control_dir is not None:
        if control_dir.grid.steps != tgrid.steps:
            raise ValidationError("solve_linearized: control grid mismatch")
        src = src + control_dir.values
    if source is not None:
        if source.grid.steps != tgrid.steps:
            raise ValidationError("solve_linearized: source grid mismatch")
        src = src + source.values
    x0 = np.zeros(2 * n)
    if final_dir is not None:
        x0 = flip_velocity(final_dir.stacked())
    kick_disp = reversed_kick_displacements(base, grid) if cubic_on else None
    states = strang_linear_sweep(
        grid, tgrid, x0, kick_disp, reversed_source_midpoints(src)
    )
    out = states[::-1].copy()
    out[:, n:] *= -1.0
    return Trajectory(tgrid, out)
