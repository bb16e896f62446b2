"""The minimum-energy optimal control problem and its value function.

Given a final-time offset from the nominal trajectory and the relative
measurements collected up to that time, the problem reconstructs the
cheapest disturbances explaining them.  The solver is Gauss-Newton on the
reduced cost with conjugate-gradient inner solves, globalized by
backtracking; optimality is certified by the reduced gradient, which equals
v + p with p the adjoint state, so the first-order condition v = -p is the
convergence test itself.  Value-function derivatives are evaluated through
the same discrete-adjoint machinery, which is what makes the
finite-difference oracles land at solver precision.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .adjoint import DiscreteOcp, SweepCache, control_inner, control_norm
from .discretization import (
    EnergyState,
    MeasurementOp,
    SpectralGrid,
    energy_norm,
)
from .dynamics import ControlSignal, OutputSignal, Trajectory
from .errors import NonconvergenceError, TrustRegionError, ValidationError
from .lqr_riccati import HessianOperator, cg_control


@dataclass(frozen=True)
class SolverTolerances:
    """Iteration budgets and tolerances for the OCP and downstream solvers."""

    ocp_grad: float = 1e-9
    ocp_max_iter: int = 40
    cg: float = 1e-10
    cg_max_iter: int = 400
    argmin_grad: float = 1e-8
    argmin_max_iter: int = 25
    fixed_point: float = 1e-10
    fixed_point_max_iter: int = 100
    margin_floor: float = 1e-8


@dataclass(frozen=True)
class OcpData:
    """One instance of the minimum-energy problem.

    horizon_index selects the prefix [0, t] of the master grid; xi is the
    prescribed final-time offset from the nominal trajectory; y holds the
    relative measurements on that prefix.
    """

    grid: SpectralGrid
    nominal: Trajectory
    measurement: MeasurementOp
    horizon_index: int
    xi: EnergyState
    y: OutputSignal
    alpha: float
    cubic_on: bool = True
    trust_radius: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValidationError("alpha: must be positive")
        if not 0 <= self.horizon_index <= self.nominal.grid.steps:
            raise ValidationError("horizon_index: outside the master grid")
        if self.horizon_index > 0:
            if self.y.grid.steps != self.horizon_index or not math.isclose(
                self.y.grid.dt, self.nominal.grid.dt, rel_tol=1e-12
            ):
                raise ValidationError(
                    "y: must be sampled on the [0, t] prefix of the nominal grid"
                )

    @property
    def horizon_time(self) -> float:
        return self.nominal.grid.times[self.horizon_index]

    def problem(self) -> DiscreteOcp:
        k = self.horizon_index
        return DiscreteOcp(
            self.grid,
            self.nominal.grid.prefix(k),
            self.measurement,
            self.alpha,
            self.cubic_on,
            self.nominal.states[: k + 1],
            self.y.values,
        )

    def check_trust_region(self):
        size = max(energy_norm(self.xi, self.grid), self.y.norm())
        if size >= self.trust_radius:
            raise TrustRegionError(
                f"data size {size:.3e} outside trust region {self.trust_radius:.3e}: "
                "the minimum-energy problem is only certified locally well-posed; "
                "reduce the disturbance amplitudes"
            )


@dataclass
class OcpSolution:
    """Optimal triple with its optimality certificate.

    v_star + p_star vanishes within grad_norm, which is the first-order
    optimality condition of the reduced problem.
    """

    w_star: Trajectory
    v_star: ControlSignal
    p_star: ControlSignal
    value: float
    grad_norm: float
    iterations: int = 0
    cg_iterations: int = 0
    problem: DiscreteOcp | None = None
    cache: SweepCache | None = None


def cost(w: Trajectory, v: ControlSignal, data: OcpData) -> float:
    """Evaluate the energy cost of a given trajectory/control pair."""
    prob = data.problem()
    if w.grid.steps != prob.tgrid.steps or v.grid.steps != prob.tgrid.steps:
        raise ValidationError("cost: trajectory/control must live on the horizon grid")
    residuals = data.y.values - (w.states - prob.nominal_states) @ data.measurement.matrix.T
    return prob._cost_from(w.states, residuals, v.values)


def absolute_cost(
    w: Trajectory, v: ControlSignal, y_abs: OutputSignal, data: OcpData
) -> float:
    """The same cost written against absolute measurements (no shift)."""
    prob = data.problem()
    residuals = y_abs.values - w.states @ data.measurement.matrix.T
    return prob._cost_from(w.states, residuals, v.values)


def adjoint_gradient(v: ControlSignal, data: OcpData):
    """Reduced-cost gradient by one backward-adjoint sweep.

    Returns (grad, w, p) with grad = v + p; correctness is pinned by the
    duality identity (grad, h) = d/de J(v + e h) checked in the tests.
    """
    prob = data.problem()
    cache = prob.run(v.values, data.xi.stacked())
    grad_v, _ = prob.gradient(cache)
    grad = ControlSignal(prob.tgrid, grad_v)
    p = ControlSignal(prob.tgrid, grad_v - v.values)
    return grad, prob.trajectory(cache), p


def solve_ocp(
    data: OcpData,
    tol: float | None = None,
    max_iter: int | None = None,
    tolerances: SolverTolerances = SolverTolerances(),
    v0: ControlSignal | None = None,
) -> OcpSolution:
    """Gauss-Newton with CG inner solves on the reduced problem.

    Inner systems use the Gauss-Newton part of the Hessian (positive
    definite for any data); steps are backtracked on the cost.  Returns
    once the optimality residual ||v + p|| drops below tol.
    """
    data.check_trust_region()
    tol = tolerances.ocp_grad if tol is None else tol
    max_iter = tolerances.ocp_max_iter if max_iter is None else max_iter
    prob = data.problem()
    xi = data.xi.stacked()
    v = np.zeros((prob.tgrid.steps + 1, prob.n)) if v0 is None else v0.values.copy()
    cache = prob.run(v, xi)
    grad_v, _ = prob.gradient(cache)
    gnorm = control_norm(grad_v, prob.weights)
    iterations = 0
    cg_total = 0
    while gnorm > tol:
        if iterations >= max_iter:
            raise NonconvergenceError(
                f"optimal-control solve did not converge: gradient {gnorm:.3e} "
                f"after {iterations} iterations (tol {tol:.1e})",
                residual=gnorm,
                iterations=iterations,
            )
        eta = min(0.1, 0.5 * tol / gnorm) if gnorm > 0 else 0.1
        cg_tol = max(eta, 1e-12)

        def apply_fn(d):
            hv, _ = prob.hessian_product(cache, d, None, full_newton=False)
            return hv

        direction, cg_iters = cg_control(
            apply_fn, -grad_v, prob.weights, cg_tol, tolerances.cg_max_iter
        )
        cg_total += cg_iters
        slope = control_inner(grad_v, direction, prob.weights)
        if slope >= 0:
            raise NonconvergenceError(
                "Gauss-Newton produced a non-descent direction", residual=gnorm
            )
        step = 1.0
        accepted = False
        # sums of ~M cost terms resolve decreases only down to this noise floor
        noise = 64.0 * np.finfo(float).eps * max(1.0, abs(cache.cost))
        for _ in range(30):
            v_trial = v + step * direction
            cache_trial = prob.run(v_trial, xi)
            if cache_trial.cost <= cache.cost + 1e-4 * step * slope + noise:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            raise NonconvergenceError(
                "line search failed on the reduced cost", residual=gnorm
            )
        v = v_trial
        cache = cache_trial
        if control_norm(v, prob.weights) > 8.0 * data.trust_radius:
            raise TrustRegionError(
                "control iterate left the trust region: reduce (xi, y)"
            )
        grad_v, _ = prob.gradient(cache)
        gnorm = control_norm(grad_v, prob.weights)
        iterations += 1
    prob.gradient(cache)
    return OcpSolution(
        w_star=prob.trajectory(cache),
        v_star=ControlSignal(prob.tgrid, v),
        p_star=ControlSignal(prob.tgrid, cache.grad_v - v),
        value=cache.cost,
        grad_norm=gnorm,
        iterations=iterations,
        cg_iterations=cg_total,
        problem=prob,
        cache=cache,
    )


# -- value function and derivatives ----------------------------------------------------


def value(data: OcpData, tolerances: SolverTolerances = SolverTolerances()) -> float:
    """Minimal disturbance energy compatible with (xi, y) at the horizon."""
    if data.horizon_index == 0:
        return 0.5 * energy_norm(data.xi, data.grid) ** 2
    return solve_ocp(data, tolerances=tolerances).value


def value_gradient(
    data: OcpData,
    tolerances: SolverTolerances = SolverTolerances(),
    solution: OcpSolution | None = None,
) -> EnergyState:
    """Energy-space Riesz representative of the xi-derivative of the value.

    By the envelope theorem only the explicit xi-dependence survives at the
    optimum; the adjoint sweep of the converged solve evaluates exactly
    that, so the finite-difference oracle on the value function is matched
    at solver precision.
    """
    if data.horizon_index == 0:
        return data.xi
    sol = solution if solution is not None else solve_ocp(data, tolerances=tolerances)
    _, grad_xi = sol.problem.gradient(sol.cache)
    return EnergyState.from_stacked(grad_xi)


def _hessian_directions(
    sol: OcpSolution,
    directions: np.ndarray,
    cg_tol: float,
    cg_max_iter: int,
) -> np.ndarray:
    """Apply the value Hessian to a block of xi-directions.

    Uses the partitioned (Schur-complement) form: the cross term is solved
    against the exact control Hessian by block CG, then one joint product
    assembles the xi block.  All products carry the full second-order
    terms, so the result is the Hessian of the computed value function.
    """
    prob = sol.problem
    cache = sol.cache
    single = directions.ndim == 1
    dxi = directions[:, None] if single else directions

    hv_cross, _ = prob.hessian_product(cache, None, dxi, full_newton=True)

    def apply_fn(d):
        hv, _ = prob.hessian_product(cache, d, None, full_newton=True)
        return hv

    delta, _ = cg_control(apply_fn, -hv_cross, prob.weights, cg_tol, cg_max_iter)
    _, hxi = prob.hessian_product(cache, delta, dxi, full_newton=True)
    return hxi[:, 0] if single else hxi


def value_hessian_apply(
    data: OcpData,
    directions: np.ndarray,
    tolerances: SolverTolerances = SolverTolerances(),
    solution: OcpSolution | None = None,
) -> np.ndarray:
    """Value Hessian applied to selected directions (stacked coefficients)."""
    if data.horizon_index == 0:
        return directions.copy()
    sol = solution if solution is not None else solve_ocp(data, tolerances=tolerances)
    return _hessian_directions(sol, directions, tolerances.cg, tolerances.cg_max_iter)


_HESSIAN_CHUNK = 16


def value_hessian(
    data: OcpData,
    tolerances: SolverTolerances = SolverTolerances(),
    solution: OcpSolution | None = None,
) -> HessianOperator:
    """Assemble the full Hessian, symmetrized, with its coercivity margin.

    Columns are produced in fixed-size chunks in a fixed order;
    MORTENSEN_THREADS only bounds how many chunks are computed concurrently,
    so the assembled matrix is bit-identical for every thread count.
    """
    n2 = 2 * data.grid.mode_count
    t = data.horizon_time
    if data.horizon_index == 0:
        return HessianOperator.identity(data.grid, 0.0)
    sol = solution if solution is not None else solve_ocp(data, tolerances=tolerances)
    sol.problem.gradient(sol.cache)  # fill the adjoint cache before any fan-out
    basis = np.eye(n2)
    blocks = [basis[:, i : i + _HESSIAN_CHUNK] for i in range(0, n2, _HESSIAN_CHUNK)]

    def run_block(blk):
        return _hessian_directions(sol, blk, tolerances.cg, tolerances.cg_max_iter)

    workers = max(1, int(os.environ.get("MORTENSEN_THREADS", "1")))
    if workers == 1:
        results = [run_block(blk) for blk in blocks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_block, blocks))
    return HessianOperator(np.concatenate(results, axis=1), data.grid, t)


def hjb_residual(
    data: OcpData,
    dt_fd: float,
    y_full: OutputSignal,
    tolerances: SolverTolerances = SolverTolerances(),
) -> float:
    """Defect of the value function in the formal Hamilton-Jacobi relation.

    Evaluated in the unshifted frame at the absolute state nominal(t) + xi:
    the time derivative is a central difference over dt_fd (the fixed
    absolute state is re-expressed against the neighboring-horizon
    nominal), the spatial gradient comes from the adjoint sweep, and the
    drift term uses the full nonlinear vector field.  Diagnostic only.
    """
    tgrid = data.nominal.grid
    ratio = dt_fd / tgrid.dt
    r = round(ratio)
    if r < 1 or abs(ratio - r) > 1e-9:
        raise ValidationError("dt_fd: must be a positive multiple of dt")
    k = data.horizon_index
    if k - r < 0 or k + r > tgrid.steps:
        raise ValidationError("hjb_residual: horizon too close to the grid boundary")
    if y_full.grid.steps < k + r:
        raise ValidationError("hjb_residual: y must extend past the horizon by dt_fd")
    n = data.grid.mode_count
    xi_hat = data.nominal.states[k] + data.xi.stacked()

    def value_at(index: int) -> float:
        xi_loc = EnergyState.from_stacked(xi_hat - data.nominal.states[index])
        if index == 0:
            return 0.5 * energy_norm(xi_loc, data.grid) ** 2
        d = replace(
            data,
            horizon_index=index,
            xi=xi_loc,
            y=OutputSignal(tgrid.prefix(index), y_full.values[: index + 1]),
        )
        return value(d, tolerances=tolerances)

    v_plus = value_at(k + r)
    v_minus = value_at(k - r)
    dv_dt = (v_plus - v_minus) / (2.0 * r * tgrid.dt)

    grad = value_gradient(data, tolerances=tolerances).stacked()
    # drift F(xi_hat) = A xi_hat - [0; cubic] in stacked coefficients
    drift = np.empty_like(xi_hat)
    drift[:n] = xi_hat[n:]
    drift[n:] = -data.grid.eigenvalues * xi_hat[:n]
    if data.cubic_on:
        drift[n:] -= data.grid.cubic(xi_hat[:n])
    gram = data.grid.gram
    transport = float(np.dot(gram * grad, drift))
    control_term = 0.5 * float(np.dot(grad[n:], grad[n:]))
    innovation = data.y.values[k] - data.measurement.apply(data.xi.stacked())
    tracking = 0.5 * data.alpha * float(np.dot(innovation, innovation))
    return abs(dv_dt + transport + control_term - tracking)
