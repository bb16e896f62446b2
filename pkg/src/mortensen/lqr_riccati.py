"""Linear-quadratic subproblems and the Riccati equation along the model.

Two independent routes to the value-function Hessian live here.  The first
solves the generalized LQ optimality system by conjugate gradients on the
reduced quadratic, with matrix-vector products supplied by the exact
discrete tangent/adjoint sweeps.  The second integrates the Riccati
equation satisfied by the Hessian along the nominal trajectory.  The
Riccati stepping works in a rotating (interaction-picture) frame: the exact
wave rotations are factored out, so the ODE solver only ever sees the
smooth, bounded coefficients and the stiff frequencies cost no accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .adjoint import DiscreteOcp, SweepCache
from .discretization import EnergyState, MeasurementOp, Rotation, SpectralGrid
from .dynamics import (
    ControlSignal,
    TimeGrid,
    Trajectory,
    solve_forward,
)
from .errors import (
    CoercivityLossError,
    NonconvergenceError,
    TrustRegionError,
    ValidationError,
)


# -- conjugate gradients on the reduced quadratic -------------------------------------


def cg_control(apply_fn, rhs, weights, tol, max_iter, rtol_floor=1e-14, x0=None):
    """Block CG in the trapezoid inner product on control space.

    rhs has shape (M+1, N) or (M+1, N, K); each column is solved to the
    relative residual `tol`.  apply_fn must be self-adjoint positive
    definite in that inner product; negative curvature aborts with a
    trust-region error since it falsifies local convexity.
    """
    single = rhs.ndim == 2
    b = rhs[:, :, None] if single else rhs
    w = weights[:, None, None]

    def ip(u, v):
        return np.einsum("tnk,tnk->k", w * u, v)

    if x0 is None:
        x = np.zeros_like(b)
        r = b.copy()
    else:
        x = (x0[:, :, None] if single else x0).copy()
        ax = apply_fn(x[:, :, 0])[:, :, None] if single else apply_fn(x)
        r = b - ax
    p = r.copy()
    rr = ip(r, r)
    bnorm = np.sqrt(ip(b, b))
    target = np.maximum(tol * bnorm, rtol_floor)
    iterations = 0
    for it in range(max_iter):
        if np.all(np.sqrt(rr) <= target):
            break
        if single:
            ap = apply_fn(p[:, :, 0])[:, :, None]
        else:
            ap = apply_fn(p)
        pap = ip(p, ap)
        if np.any(pap <= 0):
            raise TrustRegionError(
                "negative curvature in the reduced quadratic: data outside the "
                "trust region where local strict convexity is certified"
            )
        alpha = rr / pap
        x += alpha[None, None, :] * p
        r -= alpha[None, None, :] * ap
        rr_new = ip(r, r)
        beta = rr_new / rr
        p = r + beta[None, None, :] * p
        rr = rr_new
        iterations = it + 1
    else:
        rel = float(np.max(np.sqrt(rr) / np.maximum(bnorm, 1e-300)))
        if rel > max(tol, 1e-12) * 10:
            raise NonconvergenceError(
                f"conjugate gradients stalled at relative residual {rel:.3e}",
                residual=rel,
                iterations=max_iter,
            )
    return (x[:, :, 0] if single else x), iterations


# -- the E-self-adjoint Hessian operator ----------------------------------------------


@dataclass(frozen=True)
class HessianOperator:
    """Energy-space self-adjoint operator on stacked coefficients.

    The matrix is the Euclidean representation; self-adjointness means
    G H = (G H)^T with G the diagonal energy Gram matrix.  The coercivity
    margin is the smallest eigenvalue of the symmetric form in the energy
    metric.
    """

    matrix: np.ndarray
    grid: SpectralGrid
    grid_time: float = 0.0
    coercivity_margin: float = field(init=False)

    def __post_init__(self):
        n2 = 2 * self.grid.mode_count
        if self.matrix.shape != (n2, n2):
            raise ValidationError("hessian: matrix must be (2N, 2N)")
        g = self.grid.gram
        s = self.matrix * g[:, None]
        s = 0.5 * (s + s.T)
        object.__setattr__(self, "matrix", s / g[:, None])
        sqg = np.sqrt(g)
        d = s / sqg[:, None] / sqg[None, :]
        margin = float(sla.eigvalsh(0.5 * (d + d.T))[0])
        object.__setattr__(self, "coercivity_margin", margin)

    @staticmethod
    def identity(grid: SpectralGrid, grid_time: float = 0.0) -> "HessianOperator":
        return HessianOperator(np.eye(2 * grid.mode_count), grid, grid_time)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ x


def energy_margin(matrix: np.ndarray, grid: SpectralGrid) -> float:
    """Smallest eigenvalue of an operator's symmetric form in the E metric."""
    sqg = np.sqrt(grid.gram)
    d = matrix * (sqg[:, None] / sqg[None, :])
    return float(sla.eigvalsh(0.5 * (d + d.T))[0])


def invert_hessian(
    hess: HessianOperator, rhs: EnergyState, margin_floor: float = 1e-8
) -> EnergyState:
    """Apply the inverse through an SPD factorization in the energy metric."""
    if hess.coercivity_margin <= margin_floor:
        raise CoercivityLossError(
            "hessian coercivity margin "
            f"{hess.coercivity_margin:.3e} at or below floor {margin_floor:.1e}; "
            "the local convexity certificate does not hold for this data",
            margin=hess.coercivity_margin,
        )
    g = hess.grid.gram
    sqg = np.sqrt(g)
    d = hess.matrix * (sqg[:, None] / sqg[None, :])
    d = 0.5 * (d + d.T)
    cho = sla.cho_factor(d, check_finite=False)
    b = rhs.stacked()
    z = sla.cho_solve(cho, sqg * b, check_finite=False)
    x = z / sqg
    # one refinement step keeps the residual at the 1e-10 contract
    r = b - hess.matrix @ x
    x += sla.cho_solve(cho, sqg * r, check_finite=False) / sqg
    return EnergyState.from_stacked(x)


# -- generalized LQ solve --------------------------------------------------------------


@dataclass
class GlqrData:
    """Linearization-point context plus the affine data of the LQ problem.

    problem/base_cache fix the point (state trajectory, control, output
    data) at which the optimality system is linearized; f, gamma, L1, L2
    are the inhomogeneities.
    """

    problem: DiscreteOcp
    base_cache: SweepCache
    f: Trajectory | None = None
    gamma: np.ndarray | None = None      # (M+1, m)
    L1: np.ndarray | None = None         # (M+1, N), trapezoid representative
    L2: np.ndarray | None = None


def solve_glqr(data: GlqrData, tol: float = 1e-10, max_iter: int = 400, v0=None):
    """Solve the linearized optimality system around the base point.

    Returns the unique triple (w, v, p): the state perturbation, the
    minimizing control and the adjoint, satisfying the three-equation
    optimality system to the CG residual `tol`.  v0 seeds the CG iteration
    (the solution does not depend on it; uniqueness is a test surface).
    """
    prob = data.problem
    steps = prob.tgrid.steps
    n = prob.n
    cache = data.base_cache
    if prob.cubic_on and cache.b2bar is None:
        prob.gradient(cache)

    # right-hand side: adjoint of the affine state term plus the linear costs
    r_nodes = np.zeros((steps + 1, prob.meas.output_dim))
    f0 = np.zeros(2 * n)
    if data.gamma is not None:
        r_nodes = r_nodes + data.gamma
    if data.f is not None:
        if data.f.grid.steps != steps:
            raise ValidationError("glqr: affine term grid mismatch")
        r_nodes = r_nodes - data.f.states @ prob.meas.matrix.T
        f0 = data.f.states[0]
    seeds_w = -prob.alpha * (prob.weights[:, None] * r_nodes) @ prob.meas.matrix
    seeds_w[0] += prob.gram * f0
    seeds = seeds_w[::-1].copy()
    seeds[:, n:] *= -1.0
    rot = prob.rot_half
    dt = prob.tgrid.dt
    mu = seeds[steps].copy()
    b2bar = np.empty((steps, n))
    for j in range(steps - 1, -1, -1):
        y1 = rot.apply_transpose(mu)
        b2bar[j] = y1[n:]
        if prob.cubic_on:
            y1[:n] -= dt * prob.grid.linearized_cubic(cache.kick_disp[j], y1[n:])
        mu = rot.apply_transpose(y1) + seeds[j]
    tstar = prob._distribute_kick_bar(b2bar) / prob.weights[:, None]
    rhs = -tstar
    if data.L1 is not None:
        rhs = rhs - data.L1
    if data.L2 is not None:
        rhs = rhs - data.L2

    def apply_fn(d):
        hv, _ = prob.hessian_product(cache, d, None, full_newton=True)
        return hv

    v, _ = cg_control(apply_fn, rhs, prob.weights, tol, max_iter, x0=v0)
    rdot, _ = prob.tangent(cache, v, None)
    w_states = prob.tangent_states(rdot)
    if data.f is not None:
        w_states = w_states + data.f.states
    p = -v - (data.L2 if data.L2 is not None else 0.0)
    return (
        Trajectory(prob.tgrid, w_states),
        ControlSignal(prob.tgrid, v),
        ControlSignal(prob.tgrid, p),
    )


# -- Riccati equation along the nominal trajectory -------------------------------------


@dataclass(frozen=True)
class RiccatiSolution:
    """Grid samples of the Riccati operator, P(t_M) = identity.

    operators[k] is P(t_k); the value-function Hessian at horizon t_k is
    P(t_M - t_k) = operators[M - k], exposed by hessian_at_horizon.
    """

    grid: TimeGrid
    operators: np.ndarray  # (M+1, 2N, 2N)

    def hessian_at_horizon(self, index: int) -> np.ndarray:
        return self.operators[self.grid.steps - index]


def _rotation_pair(grid: SpectralGrid, tau: float):
    return Rotation(grid, tau), Rotation(grid, -tau)


def _conjugate(rot_minus: Rotation, rot_plus: Rotation, mat: np.ndarray) -> np.ndarray:
    """E(-tau) X E(tau) with the exact wave rotations."""
    return rot_plus.apply_matrix_right(rot_minus.apply(mat))


def _sharp(mat: np.ndarray, gram: np.ndarray) -> np.ndarray:
    """Adjoint in the energy metric: G^{-1} X^T G."""
    return (mat.T * gram[None, :]) / gram[:, None]


class _NominalCoefficients:
    """Stage coefficients of the Riccati flow, sampled at half steps.

    Uses a dt/2 resolution of the nominal trajectory so every Runge-Kutta
    stage sees a consistent displacement field.
    """

    def __init__(self, grid, meas, alpha, cubic_on, fine_disp):
        self.grid = grid
        self.cubic_on = cubic_on
        self.q0 = alpha * (meas.matrix / grid.gram[None, :]).T @ meas.matrix
        n = grid.mode_count
        s = np.zeros((2 * n, 2 * n))
        s[n:, n:] = np.eye(n)
        self.bbsharp = s
        self.fine_disp = fine_disp  # (2M+1, N) displacement at sigma = i dt/2
        self.n = n

    def coupling(self, half_index: int) -> np.ndarray | None:
        """Matrix of z -> 3 proj(u^2 z) at sigma = half_index * dt/2."""
        if not self.cubic_on:
            return None
        u = self.grid.to_physical(self.fine_disp[half_index])
        grid = self.grid
        return 3.0 * (grid._analysis * (u * u)[None, :]) @ grid._synthesis


def riccati_nominal(
    nominal: Trajectory,
    grid: SpectralGrid,
    meas: MeasurementOp,
    alpha: float,
    cubic_on: bool = True,
    fine_nominal: Trajectory | None = None,
) -> RiccatiSolution:
    """Integrate the Hessian Riccati equation along the nominal trajectory.

    The unknown K(s) equals the value-function Hessian at horizon s (so the
    stored P satisfies P(T - s) = K(s) with terminal value P(T) = Id).  The
    flow is stepped with classical RK4 in the frame rotating with the wave
    group; the rotations themselves are applied exactly, mode by mode.
    """
    tgrid = nominal.grid
    if alpha <= 0:
        raise ValidationError("alpha: must be positive")
    if fine_nominal is None:
        fine = solve_forward(
            nominal.state(0), None, TimeGrid(tgrid.t_final, 0.5 * tgrid.dt), grid, cubic_on
        )
    else:
        fine = fine_nominal
        if fine.grid.steps != 2 * tgrid.steps:
            raise ValidationError("riccati: fine nominal must live on the dt/2 grid")
    n = grid.mode_count
    steps = tgrid.steps
    dt = tgrid.dt
    gram = grid.gram
    coeffs = _NominalCoefficients(grid, meas, alpha, cubic_on, fine.states[:, :n])

    def plain_rhs(sigma: float, half_index: int, k_mat: np.ndarray) -> np.ndarray:
        """Riccati derivative at time sigma, conjugated into the rotating frame."""
        rot_minus, rot_plus = Rotation(grid, -sigma), Rotation(grid, sigma)
        qc = _conjugate(rot_minus, rot_plus, coeffs.q0)
        sc = _conjugate(rot_minus, rot_plus, coeffs.bbsharp)
        rhs = qc - k_mat @ (sc @ k_mat)
        w = coeffs.coupling(half_index)
        if w is not None:
            f = np.zeros((2 * n, 2 * n))
            f[n:, :n] = w
            fc = _conjugate(rot_minus, rot_plus, f)
            rhs += _sharp(fc, gram) @ k_mat + k_mat @ fc
        return rhs

    k_tilde = np.eye(2 * n)
    hessians = np.empty((steps + 1, 2 * n, 2 * n))
    hessians[0] = np.eye(2 * n)
    for j in range(steps):
        sigma = j * dt
        k1 = plain_rhs(sigma, 2 * j, k_tilde)
        k2 = plain_rhs(sigma + 0.5 * dt, 2 * j + 1, k_tilde + 0.5 * dt * k1)
        k3 = plain_rhs(sigma + 0.5 * dt, 2 * j + 1, k_tilde + 0.5 * dt * k2)
        k4 = plain_rhs(sigma + dt, 2 * j + 2, k_tilde + dt * k3)
        k_tilde = k_tilde + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        s = k_tilde * gram[:, None]
        k_tilde = (0.5 * (s + s.T)) / gram[:, None]
        rp = Rotation(grid, (j + 1) * dt)
        rm = Rotation(grid, -(j + 1) * dt)
        hessians[j + 1] = rm.apply_matrix_right(rp.apply(k_tilde))
    return RiccatiSolution(tgrid, hessians[::-1].copy())


def riccati_margins(ricc: RiccatiSolution, grid: SpectralGrid) -> np.ndarray:
    """Coercivity margin of P at every grid time."""
    sqg = np.sqrt(grid.gram)
    out = np.empty(ricc.grid.steps + 1)
    for k in range(out.shape[0]):
        d = ricc.operators[k] * (sqg[:, None] / sqg[None, :])
        out[k] = sla.eigvalsh(0.5 * (d + d.T))[0]
    return out


def riccati_integral_residual(
    ricc: RiccatiSolution,
    grid: SpectralGrid,
    meas: MeasurementOp,
    alpha: float,
    cubic_on: bool,
    sample_index: int,
    fine_nominal: Trajectory | None = None,
    nominal: Trajectory | None = None,
) -> float:
    """Defect of the integral Riccati form at one sampled time.

    Rebuilds P(t) from the evolution operator of the time-reversed
    linearized dynamics and the quadratic integrand, using composite Simpson
    quadrature on the grid (fourth order, which resolves the mode-frequency
    oscillations of the integrand), and returns the energy-metric spectral
    norm of the mismatch.  The number of intervals from the sample to the
    final time must be even.
    """
    tgrid = ricc.grid
    steps = tgrid.steps
    if not 0 <= sample_index < steps:
        raise ValidationError("riccati residual: sample index out of range")
    if (steps - sample_index) % 2 != 0:
        raise ValidationError("riccati residual: need an even number of intervals")
    if fine_nominal is None:
        if nominal is None:
            raise ValidationError("riccati residual: a nominal trajectory is required")
        fine_nominal = solve_forward(
            nominal.state(0), None, TimeGrid(tgrid.t_final, 0.5 * tgrid.dt), grid, cubic_on
        )
    n = grid.mode_count
    dt = tgrid.dt
    gram = grid.gram
    t0 = sample_index * dt
    coeffs = _NominalCoefficients(
        grid, meas, alpha, cubic_on, fine_nominal.states[:, :n]
    )

    def interaction(s: float, fine_half_index: int, z: np.ndarray) -> np.ndarray:
        """Rotating-frame derivative of the evolution-operator columns.

        The generator's coupling block is the nominal displacement squared
        sampled at the reversed time T - s, i.e. fine index 2(M - s/dt).
        """
        if not cubic_on:
            return np.zeros_like(z)
        w = coeffs.coupling(fine_half_index)
        rot_back = Rotation(grid, -(s - t0))
        u = rot_back.apply(z)
        out = np.zeros_like(u)
        out[n:] = w @ u[:n]
        return Rotation(grid, s - t0).apply(out)

    z = np.eye(2 * n)  # rotating-frame evolution operator, starts at identity
    total = np.zeros((2 * n, 2 * n))
    q0 = coeffs.q0
    bbs = coeffs.bbsharp

    def integrand(idx: int, z_now: np.ndarray) -> np.ndarray:
        s = idx * dt
        rot_back = Rotation(grid, -(s - t0))
        u_mat = rot_back.apply(z_now)  # U(s, t0)
        p = ricc.operators[idx]
        y = q0 - p @ (bbs @ p)
        return _sharp(u_mat, gram) @ (y @ u_mat)

    # propagate U while accumulating Simpson quadrature over [t0, T]
    vals_prev = integrand(sample_index, z)
    for j in range(sample_index, steps, 2):
        s0 = j * dt
        # advance two grid steps with RK4 (stage data at dt/2 resolution)
        mids = []
        for sub in range(2):
            idx = j + sub
            s = s0 + sub * dt
            h0 = 2 * (steps - idx)        # fine index of T - s
            k1 = interaction(s, h0, z)
            k2 = interaction(s + 0.5 * dt, h0 - 1, z + 0.5 * dt * k1)
            k3 = interaction(s + 0.5 * dt, h0 - 1, z + 0.5 * dt * k2)
            k4 = interaction(s + dt, h0 - 2, z + dt * k3)
            z = z + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            mids.append(integrand(idx + 1, z))
        total += (dt / 3.0) * (vals_prev + 4.0 * mids[0] + mids[1])
        vals_prev = mids[1]

    u_final = Rotation(grid, -(tgrid.t_final - t0)).apply(z)
    reconstructed = _sharp(u_final, gram) @ u_final + total
    delta = ricc.operators[sample_index] - reconstructed
    sqg = np.sqrt(gram)
    return float(np.linalg.norm(delta * (sqg[:, None] / sqg[None, :]), 2))
