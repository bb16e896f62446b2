"""Minimum-energy observer drivers and the linear-case reference filter.

Four routes to a state estimate from the same relative measurements:

* run_observer integrates the shifted observer equation, with the inverse
  value-function Hessian as gain (either frozen along the nominal via the
  Riccati solution, or refreshed from the full Hessian at the current
  estimate);
* fixed_point_observer iterates the trajectory fixed-point map whose linear
  part absorbs the nominal-gain terms;
* argmin_estimator minimizes the value function pointwise in time by a
  warm-started Newton iteration;
* kalman_bucy propagates the covariance form of the linear filter, which
  is the closed-form answer when the cubic term is off.

compare() quantifies pairwise discrepancies; equivalence of the first three
in the nonlinear case is measured, never asserted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .discretization import EnergyState, Rotation, SpectralGrid, energy_norm_stacked
from .dynamics import ControlSignal, OutputSignal, Trajectory
from .errors import (
    CoercivityLossError,
    NonconvergenceError,
    TrustRegionError,
    ValidationError,
)
from .lqr_riccati import invert_hessian
from .ocp import OcpData, solve_ocp, value_gradient, value_hessian


@dataclass(frozen=True)
class GainMode:
    """Observer gain selection.

    riccati_nominal uses the Hessian along the nominal trajectory (solved
    once, applied at every step); full_hessian re-evaluates the Hessian at
    the current estimate every refresh_every steps.
    """

    kind: str = "riccati_nominal"
    refresh_every: int = 1

    def __post_init__(self):
        if self.kind not in ("riccati_nominal", "full_hessian"):
            raise ValidationError("gain.kind: expected riccati_nominal or full_hessian")
        if self.refresh_every < 1:
            raise ValidationError("gain.refresh_every: must be >= 1")


@dataclass
class ObserverRun:
    """Shifted and absolute estimate trajectories with gain diagnostics."""

    shifted: Trajectory
    absolute: Trajectory
    gain_margins: np.ndarray
    residual: float
    iterations: int = 0

    def __post_init__(self):
        if self.shifted.states.shape != self.absolute.states.shape:
            raise ValidationError("observer run: trajectory shape mismatch")


class _GainSolver:
    """Factorization of one Hessian in the energy metric, for gain solves."""

    def __init__(self, matrix: np.ndarray, grid: SpectralGrid):
        sqg = np.sqrt(grid.gram)
        d = matrix * (sqg[:, None] / sqg[None, :])
        self.cho = sla.cho_factor(0.5 * (d + d.T), check_finite=False)
        self.sqg = sqg

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return sla.cho_solve(self.cho, self.sqg * rhs, check_finite=False) / self.sqg


def _check_observer_inputs(y: OutputSignal, cfg):
    if y.grid.steps != cfg.tgrid.steps:
        raise ValidationError("observer: output signal must live on the master grid")
    if y.norm() >= cfg.trust_radius:
        raise TrustRegionError(
            "measurement energy outside the trust region of the observer equation; "
            "reduce the disturbance amplitudes"
        )


def _shifted_nonlinearity(grid: SpectralGrid, nom_disp_phys, w_disp):
    """proj((nominal + w)^3 - nominal^3) for the shifted displacement."""
    u = grid._synthesis @ w_disp
    return grid._analysis @ (u**3 + 3.0 * nom_disp_phys * u**2 + 3.0 * nom_disp_phys**2 * u)


def run_observer(y: OutputSignal, gain: GainMode, cfg) -> ObserverRun:
    """Integrate the shifted observer equation with the selected gain.

    The step is the same splitting as the dynamics: exact half rotations
    around a midpoint-RK2 kick carrying the shifted cubic terms and the
    innovation term alpha H(t)^{-1} C* (y - C w).
    """
    _check_observer_inputs(y, cfg)
    grid = cfg.grid
    tgrid = cfg.tgrid
    n = grid.mode_count
    dt = tgrid.dt
    steps = tgrid.steps
    nominal = cfg.nominal()
    meas = cfg.meas
    alpha = cfg.alpha
    floor = cfg.tolerances.margin_floor
    rot = Rotation(grid, 0.5 * dt)

    if gain.kind == "riccati_nominal":
        ricc = cfg.riccati()
        margins = cfg.riccati_margins()
        if margins.min() <= floor:
            raise CoercivityLossError(
                f"nominal Hessian margin {margins.min():.3e} at or below floor",
                margin=float(margins.min()),
            )
        hessian_nodes = [ricc.hessian_at_horizon(k) for k in range(steps + 1)]
    else:
        margins = np.full(steps + 1, np.nan)
        hessian_nodes = None

    x = np.zeros(2 * n)
    states = np.empty((steps + 1, 2 * n))
    states[0] = x
    current_hess = np.eye(2 * n)  # full-hessian mode: value at time zero
    current_margin = 1.0
    if gain.kind == "full_hessian":
        margins[0] = current_margin
    for j in range(steps):
        if gain.kind == "riccati_nominal":
            h_mid = 0.5 * (hessian_nodes[j] + hessian_nodes[j + 1])
        else:
            if j % gain.refresh_every == 0 and j > 0:
                xi_now = EnergyState.from_stacked(states[j])
                data = OcpData(
                    grid,
                    nominal,
                    meas,
                    j,
                    xi_now,
                    y.prefix(j),
                    alpha,
                    cfg.cubic_on,
                    cfg.trust_radius,
                )
                hop = value_hessian(data, tolerances=cfg.tolerances)
                if hop.coercivity_margin <= floor:
                    raise CoercivityLossError(
                        "full-hessian gain lost coercivity at step "
                        f"{j}: margin {hop.coercivity_margin:.3e}",
                        margin=hop.coercivity_margin,
                    )
                current_hess = hop.matrix
                current_margin = hop.coercivity_margin
            margins[j + 1] = current_margin
            h_mid = current_hess
        gain_solver = _GainSolver(h_mid, grid)
        y_mid = 0.5 * (y.values[j] + y.values[j + 1])
        nom_mid = 0.5 * (nominal.states[j] + nominal.states[j + 1])
        nom_phys = grid._synthesis @ nom_mid[:n]

        def kick(w):
            out = np.zeros_like(w)
            if cfg.cubic_on:
                out[n:] = -_shifted_nonlinearity(grid, nom_phys, w[:n])
            innov = y_mid - meas.apply(w)
            out += alpha * gain_solver.solve(meas.apply_adjoint(innov))
            return out

        x = rot.apply(x)
        mid = x + (0.5 * dt) * kick(x)
        x = x + dt * kick(mid)
        x = rot.apply(x)
        states[j + 1] = x
    shifted = Trajectory(tgrid, states)
    absolute = Trajectory(tgrid, nominal.states + states)
    if gain.kind == "riccati_nominal":
        node_hess = hessian_nodes
    else:
        node_hess = None
    residual = _mild_residual(states, y, cfg, node_hess)
    return ObserverRun(shifted, absolute, margins, residual)


def _mild_residual(states, y: OutputSignal, cfg, hessian_nodes) -> float:
    """Defect of the integral (mild) form on a coarse time sample."""
    grid = cfg.grid
    tgrid = cfg.tgrid
    n = grid.mode_count
    steps = tgrid.steps
    nominal = cfg.nominal()
    meas = cfg.meas
    if hessian_nodes is None:
        ricc = cfg.riccati()
        hessian_nodes = [ricc.hessian_at_horizon(k) for k in range(steps + 1)]
    # node values of the kick vector field
    kicks = np.empty_like(states)
    for k in range(steps + 1):
        w = states[k]
        out = np.zeros(2 * n)
        if cfg.cubic_on:
            nom_phys = grid._synthesis @ nominal.states[k, :n]
            out[n:] = -_shifted_nonlinearity(grid, nom_phys, w[:n])
        innov = y.values[k] - meas.apply(w)
        solver = _GainSolver(hessian_nodes[k], grid)
        out += cfg.alpha * solver.solve(meas.apply_adjoint(innov))
        kicks[k] = out
    sample = range(steps // 8, steps + 1, max(1, steps // 8))
    wts = tgrid.trapezoid_weights()
    worst = 0.0
    for idx in sample:
        acc = np.zeros(2 * n)
        for k in range(idx + 1):
            w_k = wts[k] if 0 < k < idx else 0.5 * tgrid.dt
            acc += w_k * Rotation(grid, (idx - k) * tgrid.dt).apply(kicks[k])
        defect = energy_norm_stacked(states[idx] - acc, grid)
        worst = max(worst, float(defect))
    return worst


def fixed_point_observer(y: OutputSignal, cfg) -> ObserverRun:
    """Picard iteration of the trajectory fixed-point map.

    The linear part bundles the wave group, the nominal cubic coupling and
    the nominal-gain innovation feedback; the remaining quadratic/cubic
    terms and the measurement source are frozen at the previous iterate.
    Iterates until successive trajectories agree in the sup energy norm.
    """
    _check_observer_inputs(y, cfg)
    grid = cfg.grid
    tgrid = cfg.tgrid
    n = grid.mode_count
    dt = tgrid.dt
    steps = tgrid.steps
    nominal = cfg.nominal()
    meas = cfg.meas
    alpha = cfg.alpha
    ricc = cfg.riccati()
    margins = cfg.riccati_margins()
    floor = cfg.tolerances.margin_floor
    if margins.min() <= floor:
        raise CoercivityLossError(
            f"nominal Hessian margin {margins.min():.3e} at or below floor",
            margin=float(margins.min()),
        )
    rot = Rotation(grid, 0.5 * dt)
    hess_nodes = [ricc.hessian_at_horizon(k) for k in range(steps + 1)]
    node_solvers = [_GainSolver(h, grid) for h in hess_nodes]
    mid_solvers = [
        _GainSolver(0.5 * (hess_nodes[j] + hess_nodes[j + 1]), grid)
        for j in range(steps)
    ]
    nom_phys_nodes = (grid._synthesis @ nominal.states[:, :n].T).T
    nom_phys_mid = 0.5 * (nom_phys_nodes[:-1] + nom_phys_nodes[1:])
    # measurement source alpha H^{-1} C* y at the nodes; fixed across iterations
    gain_src = np.empty((steps + 1, 2 * n))
    for k in range(steps + 1):
        gain_src[k] = alpha * node_solvers[k].solve(meas.apply_adjoint(y.values[k]))

    def linear_kick(j, w):
        out = np.zeros_like(w)
        if cfg.cubic_on:
            u = grid._synthesis @ w[:n]
            out[n:] = -grid._analysis @ (3.0 * nom_phys_mid[j] ** 2 * u)
        out -= alpha * mid_solvers[j].solve(meas.apply_adjoint(meas.apply(w)))
        return out

    def frozen_sources(z_states):
        src = np.empty((steps + 1, 2 * n))
        src[:] = gain_src
        if cfg.cubic_on:
            u = (grid._synthesis @ z_states[:, :n].T).T
            nl = (u**3 + 3.0 * nom_phys_nodes * u**2) @ grid._analysis.T
            src[:, n:] -= nl
        return 0.5 * (src[:-1] + src[1:])

    tol = cfg.tolerances.fixed_point
    z = np.zeros((steps + 1, 2 * n))
    prev_delta = math.inf
    growth_count = 0
    for it in range(cfg.tolerances.fixed_point_max_iter):
        sources = frozen_sources(z)
        x = np.zeros(2 * n)
        z_next = np.empty_like(z)
        z_next[0] = x
        for j in range(steps):
            x = rot.apply(x)
            mid = x + (0.5 * dt) * (linear_kick(j, x) + sources[j])
            x = x + dt * (linear_kick(j, mid) + sources[j])
            x = rot.apply(x)
            z_next[j + 1] = x
        delta = float(np.max(energy_norm_stacked((z_next - z).T, grid)))
        scale = 1.0 + float(np.max(energy_norm_stacked(z_next.T, grid)))
        z = z_next
        if delta <= tol * scale:
            shifted = Trajectory(tgrid, z)
            absolute = Trajectory(tgrid, nominal.states + z)
            residual = _mild_residual(z, y, cfg, hess_nodes)
            return ObserverRun(shifted, absolute, margins, residual, iterations=it + 1)
        if delta > prev_delta:
            growth_count += 1
            if growth_count >= 3:
                raise NonconvergenceError(
                    "fixed-point iteration diverging: successive updates grew by "
                    f"{delta / prev_delta:.2f}x",
                    residual=delta,
                    iterations=it + 1,
                )
        else:
            growth_count = 0
        prev_delta = delta
    raise NonconvergenceError(
        "fixed-point iteration did not converge", residual=prev_delta
    )


@dataclass
class ArgminEstimate:
    """Pointwise value-function minimizers at selected sample times."""

    indices: np.ndarray
    times: np.ndarray
    shifted_states: np.ndarray      # (S, 2N) minimizers xi*(t)
    absolute_states: np.ndarray     # (S, 2N) nominal + xi*
    grad_norms: np.ndarray
    newton_iterations: np.ndarray
    hessian_margins: np.ndarray


def argmin_estimator(y: OutputSignal, sample_indices, cfg) -> ArgminEstimate:
    """Newton iteration on the value-function gradient at each sample time.

    Warm-starts each sample from the previous minimizer (zero at time 0);
    the Newton matrix is the assembled value Hessian, refreshed once per
    sample, and steps go through the coercivity-guarded inverse.
    """
    _check_observer_inputs(y, cfg)
    grid = cfg.grid
    n = grid.mode_count
    nominal = cfg.nominal()
    tol = cfg.tolerances.argmin_grad
    indices = sorted(int(k) for k in sample_indices)
    if indices and (indices[0] < 0 or indices[-1] > cfg.tgrid.steps):
        raise ValidationError("argmin: sample index outside the grid")
    xi = np.zeros(2 * n)
    v_warm = None
    rows_xi, rows_abs, gnorms, iters, hmargins = [], [], [], [], []
    for k in indices:
        if k == 0:
            rows_xi.append(np.zeros(2 * n))
            rows_abs.append(nominal.states[0].copy())
            gnorms.append(0.0)
            iters.append(0)
            hmargins.append(1.0)
            continue
        hess = None
        newton_it = 0
        while True:
            data = OcpData(
                grid,
                nominal,
                cfg.meas,
                k,
                EnergyState.from_stacked(xi),
                y.prefix(k),
                cfg.alpha,
                cfg.cubic_on,
                cfg.trust_radius,
            )
            v0 = None
            if v_warm is not None:
                pad = k + 1 - v_warm.shape[0]
                vals = v_warm if pad <= 0 else np.vstack(
                    [v_warm, np.repeat(v_warm[-1:], pad, axis=0)]
                )
                v0 = ControlSignal(cfg.tgrid.prefix(k), vals[: k + 1])
            sol = solve_ocp(data, tolerances=cfg.tolerances, v0=v0)
            v_warm = sol.v_star.values
            g = value_gradient(data, solution=sol).stacked()
            gnorm = float(energy_norm_stacked(g, grid))
            if gnorm <= tol:
                break
            if newton_it >= cfg.tolerances.argmin_max_iter:
                raise NonconvergenceError(
                    f"argmin Newton did not converge at sample {k}: "
                    f"gradient {gnorm:.3e}",
                    residual=gnorm,
                    iterations=newton_it,
                )
            if hess is None:
                hess = value_hessian(data, tolerances=cfg.tolerances, solution=sol)
            step = invert_hessian(
                hess,
                EnergyState.from_stacked(-g),
                margin_floor=cfg.tolerances.margin_floor,
            )
            xi = xi + step.stacked()
            if energy_norm_stacked(xi, grid) >= cfg.trust_radius:
                raise TrustRegionError(
                    "argmin iterate left the trust region: reduce the data"
                )
            newton_it += 1
        rows_xi.append(xi.copy())
        rows_abs.append(nominal.states[k] + xi)
        gnorms.append(gnorm)
        iters.append(newton_it)
        hmargins.append(hess.coercivity_margin if hess is not None else np.nan)
    return ArgminEstimate(
        indices=np.array(indices, dtype=int),
        times=cfg.tgrid.times[np.array(indices, dtype=int)] if indices else np.array([]),
        shifted_states=np.array(rows_xi),
        absolute_states=np.array(rows_abs),
        grad_norms=np.array(gnorms),
        newton_iterations=np.array(iters, dtype=int),
        hessian_margins=np.array(hmargins),
    )


@dataclass
class KalmanRun:
    """Linear filter output: absolute estimate and covariance samples."""

    estimate: Trajectory
    covariances: np.ndarray  # (M+1, 2N, 2N)


def kalman_bucy_run(y: OutputSignal, cfg) -> KalmanRun:
    """Covariance-form filter for the dynamics linearized at the nominal.

    Weights mirror the energy cost: unit process weight on the velocity
    channel, measurement weight alpha, initial covariance the identity in
    the energy metric.  The estimate is propagated in shifted coordinates
    so zero measurements reproduce the nominal exactly; rotations are
    applied exactly and the covariance is conjugated by them.
    """
    if y.grid.steps != cfg.tgrid.steps:
        raise ValidationError("kalman_bucy: output signal must live on the master grid")
    grid = cfg.grid
    tgrid = cfg.tgrid
    n = grid.mode_count
    dt = tgrid.dt
    steps = tgrid.steps
    nominal = cfg.nominal()
    meas = cfg.meas
    alpha = cfg.alpha
    gram = grid.gram
    rot = Rotation(grid, 0.5 * dt)
    rot_m = Rotation(grid, -0.5 * dt)
    bb = np.zeros((2 * n, 2 * n))
    bb[n:, n:] = np.eye(n)
    csharp_c = (meas.matrix / gram[None, :]).T @ meas.matrix

    e = np.zeros(2 * n)
    sigma = np.eye(2 * n)
    estimates = np.empty((steps + 1, 2 * n))
    covariances = np.empty((steps + 1, 2 * n, 2 * n))
    estimates[0] = nominal.states[0]
    covariances[0] = sigma

    def esharp(mat):
        return (mat.T * gram[None, :]) / gram[:, None]

    def kick_sigma(s, coupling):
        out = bb - alpha * s @ (csharp_c @ s)
        if coupling is not None:
            f_s = np.zeros_like(s)
            f_s[n:, :] = -(coupling @ s[:n, :])
            out += f_s + esharp(f_s)
        return out

    for j in range(steps):
        y_mid = 0.5 * (y.values[j] + y.values[j + 1])
        coupling = None
        if cfg.cubic_on:
            nom_mid = 0.5 * (nominal.states[j, :n] + nominal.states[j + 1, :n])
            u = grid._synthesis @ nom_mid
            coupling = 3.0 * (grid._analysis * (u * u)[None, :]) @ grid._synthesis

        def kick_e(ev, s):
            innov = y_mid - meas.apply(ev)
            out = alpha * s @ meas.apply_adjoint(innov)
            if coupling is not None:
                extra = np.zeros_like(ev)
                extra[n:] = -(coupling @ ev[:n])
                out = out + extra
            return out

        # exact half rotation of estimate and covariance
        e = rot.apply(e)
        sigma = rot_m.apply_matrix_right(rot.apply(sigma))
        e_mid = e + (0.5 * dt) * kick_e(e, sigma)
        s_mid = sigma + (0.5 * dt) * kick_sigma(sigma, coupling)
        e = e + dt * kick_e(e_mid, s_mid)
        sigma = sigma + dt * kick_sigma(s_mid, coupling)
        e = rot.apply(e)
        sigma = rot_m.apply_matrix_right(rot.apply(sigma))
        s_sym = sigma * gram[:, None]
        sigma = (0.5 * (s_sym + s_sym.T)) / gram[:, None]
        if (j + 1) % 50 == 0 or j == steps - 1:
            sqg = np.sqrt(gram)
            d = sigma * (sqg[:, None] / sqg[None, :])
            if sla.eigvalsh(0.5 * (d + d.T))[0] <= 0:
                raise NonconvergenceError(
                    f"filter covariance lost positive definiteness at step {j + 1}"
                )
        estimates[j + 1] = nominal.states[j + 1] + e
        covariances[j + 1] = sigma
    return KalmanRun(Trajectory(tgrid, estimates), covariances)


def kalman_bucy(y: OutputSignal, cfg) -> Trajectory:
    """Estimate trajectory of the linear-case reference filter."""
    return kalman_bucy_run(y, cfg).estimate


def compare(estimates: dict, truth: Trajectory, grid: SpectralGrid) -> dict:
    """Energy-norm errors versus truth and pairwise discrepancies.

    estimates maps a name to (indices, states) with states row-aligned to
    indices into the truth grid.  Pairs are compared on common indices.
    """
    report = {"per_time_errors": {}, "terminal_errors": {}, "pairwise_discrepancy": {}}
    estimates = {
        name: (np.asarray(idx, dtype=int), states)
        for name, (idx, states) in estimates.items()
    }
    for name, (indices, states) in estimates.items():
        if np.any(indices < 0) or np.any(indices > truth.grid.steps):
            raise ValidationError("compare: estimate indices outside the truth grid")
        errs = energy_norm_stacked((states - truth.states[indices]).T, grid)
        errs = np.atleast_1d(errs)
        report["per_time_errors"][name] = {
            "indices": indices.tolist(),
            "errors": errs.tolist(),
        }
        report["terminal_errors"][name] = float(errs[-1])
    names = sorted(estimates)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            ia, sa = estimates[a]
            ib, sb = estimates[b]
            common, ca, cb = np.intersect1d(ia, ib, return_indices=True)
            if common.size == 0:
                continue
            diff = energy_norm_stacked((sa[ca] - sb[cb]).T, grid)
            report["pairwise_discrepancy"][f"{a}|{b}"] = float(np.max(np.atleast_1d(diff)))
    return report
