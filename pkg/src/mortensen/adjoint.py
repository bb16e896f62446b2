"""Discrete tangents and adjoints of the final-value wave solve.

The minimum-energy problem evaluates its cost on the trajectory produced by
the time-reversed Strang sweep.  This module differentiates that discrete
computation exactly: one reverse sweep yields the reduced gradient (so the
finite-difference check passes at solver precision), a forward tangent sweep
yields directional state derivatives, and a second reverse sweep carrying
the tangent of the adjoint yields exact Hessian-vector products in the joint
(control, final-offset) variable.  All sweeps accept a trailing batch axis,
which is what keeps dense Hessian assembly affordable.

Shapes: stacked states are (2N,) or (2N, K); control-space vectors are
(M+1, N) or (M+1, N, K); node seeds are Euclidean partial derivatives with
respect to the reversed-sweep node states.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .discretization import MeasurementOp, Rotation, SpectralGrid
from .dynamics import (
    TimeGrid,
    Trajectory,
    reversed_source_midpoints,
    strang_nonlinear_sweep,
)
from .errors import ValidationError


def _flip_rows(x: np.ndarray) -> np.ndarray:
    """Negate the velocity block along axis 1 of (T, 2N[, K]) arrays."""
    out = x.copy()
    n = x.shape[1] // 2
    out[:, n:] *= -1.0
    return out


def _apply_rows(mat: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Apply a matrix to axis 1 of a (T, d[, K]) array."""
    if x.ndim == 2:
        return x @ mat.T
    t, d, k = x.shape
    flat = np.moveaxis(x, 1, 0).reshape(d, t * k)
    out = mat @ flat
    return np.moveaxis(out.reshape(mat.shape[0], t, k), 0, 1)


def control_inner(u: np.ndarray, w: np.ndarray, weights: np.ndarray):
    """Trapezoid L2(0,t; L2) inner product; per-column for batches."""
    if u.ndim == 2:
        return float(np.einsum("tn,tn,t->", u, w, weights))
    return np.einsum("tnk,tnk,t->k", u, w, weights)


def control_norm(u: np.ndarray, weights: np.ndarray):
    val = control_inner(u, u, weights)
    return np.sqrt(val) if np.ndim(val) else float(np.sqrt(max(val, 0.0)))


@dataclass
class SweepCache:
    """Forward sweep at a linearization point, plus lazily-filled adjoints."""

    v_nodes: np.ndarray
    xi: np.ndarray
    reversed_states: np.ndarray          # (M+1, 2N), R_0 at the horizon time
    kick_disp: np.ndarray | None         # (M, N) base displacement at kicks
    states: np.ndarray                   # (M+1, 2N), original time order
    residuals: np.ndarray                # (M+1, m), y - C (w - nominal)
    cost: float
    grad_v: np.ndarray | None = None
    grad_xi: np.ndarray | None = None    # energy-space Riesz representative
    b2bar: np.ndarray | None = field(default=None, repr=False)


class DiscreteOcp:
    """The discrete reduced minimum-energy problem on a horizon prefix.

    Bundles everything the sweeps need: spectral grid, time prefix,
    measurement operator, tracking weight, cubic flag, the nominal
    trajectory restricted to the prefix and the relative output samples.
    """

    def __init__(
        self,
        grid: SpectralGrid,
        tgrid: TimeGrid,
        meas: MeasurementOp,
        alpha: float,
        cubic_on: bool,
        nominal_states: np.ndarray,
        y_nodes: np.ndarray,
    ):
        if alpha <= 0:
            raise ValidationError("alpha: must be positive")
        steps = tgrid.steps
        if nominal_states.shape[0] != steps + 1:
            raise ValidationError("nominal trajectory does not cover the horizon")
        if y_nodes.shape != (steps + 1, meas.output_dim):
            raise ValidationError("output samples do not match the horizon grid")
        self.grid = grid
        self.tgrid = tgrid
        self.meas = meas
        self.alpha = float(alpha)
        self.cubic_on = bool(cubic_on)
        self.nominal_states = nominal_states
        self.y_nodes = y_nodes
        self.weights = tgrid.trapezoid_weights()
        self.rot_half = Rotation(grid, 0.5 * tgrid.dt)
        self.n = grid.mode_count
        self.gram = grid.gram

    # -- forward ------------------------------------------------------------------

    def run(self, v_nodes: np.ndarray, xi: np.ndarray) -> SweepCache:
        """Integrate the final-value problem and evaluate the cost."""
        steps = self.tgrid.steps
        n = self.n
        x0 = self.nominal_states[steps] + xi
        x0 = x0.copy()
        x0[n:] *= -1.0
        v_rev = v_nodes[::-1]
        reversed_states, kick_disp = strang_nonlinear_sweep(
            self.grid, self.tgrid, x0, v_rev, self.cubic_on, keep_kick_states=True
        )
        states = _flip_rows(reversed_states[::-1])
        residuals = self.y_nodes - (states - self.nominal_states) @ self.meas.matrix.T
        cost = self._cost_from(states, residuals, v_nodes)
        return SweepCache(
            v_nodes=v_nodes,
            xi=xi,
            reversed_states=reversed_states,
            kick_disp=kick_disp,
            states=states,
            residuals=residuals,
            cost=cost,
        )

    def _cost_from(self, states, residuals, v_nodes) -> float:
        e0 = states[0] - self.nominal_states[0]
        init_term = 0.5 * float(np.dot(self.gram * e0, e0))
        ctrl_term = 0.5 * float(np.einsum("tn,tn,t->", v_nodes, v_nodes, self.weights))
        track_term = 0.5 * self.alpha * float(
            np.einsum("tm,tm,t->", residuals, residuals, self.weights)
        )
        return init_term + ctrl_term + track_term

    def cost_only(self, v_nodes: np.ndarray, xi: np.ndarray) -> float:
        return self.run(v_nodes, xi).cost

    # -- first-order adjoint ------------------------------------------------------

    def _node_seeds(self, cache: SweepCache) -> np.ndarray:
        """Euclidean cost partials w.r.t. the reversed node states."""
        seeds_w = -self.alpha * (
            self.weights[:, None] * cache.residuals
        ) @ self.meas.matrix
        seeds_w[0] += self.gram * (cache.states[0] - self.nominal_states[0])
        return _flip_rows(seeds_w[::-1])

    def gradient(self, cache: SweepCache):
        """Reduced gradient in (v, xi); one reverse sweep, cached for reuse.

        grad_v is the trapezoid-inner-product representative (it equals
        v + p with p the adjoint state); grad_xi is the energy-space Riesz
        representative of the final-offset derivative.
        """
        if cache.grad_v is not None:
            return cache.grad_v, cache.grad_xi
        steps = self.tgrid.steps
        n = self.n
        dt = self.tgrid.dt
        seeds = self._node_seeds(cache)
        kick_disp = cache.kick_disp
        rot = self.rot_half
        b2bar = np.empty((steps, n))
        mu = seeds[steps].copy()
        for j in range(steps - 1, -1, -1):
            y1 = rot.apply_transpose(mu)
            b2 = y1[n:]
            b2bar[j] = b2
            if self.cubic_on:
                y1[:n] -= dt * self.grid.linearized_cubic(kick_disp[j], b2)
            mu = rot.apply_transpose(y1) + seeds[j]
        vbar = self._distribute_kick_bar(b2bar)
        grad_v = vbar / self.weights[:, None] + cache.v_nodes
        grad_xi_e = mu.copy()
        grad_xi_e[n:] *= -1.0
        cache.b2bar = b2bar
        cache.grad_v = grad_v
        cache.grad_xi = grad_xi_e / self.gram
        return cache.grad_v, cache.grad_xi

    def _distribute_kick_bar(self, b2bar: np.ndarray) -> np.ndarray:
        """Spread per-interval kick adjoints onto the control nodes."""
        c = 0.5 * self.tgrid.dt * b2bar[::-1]
        out = np.zeros((self.tgrid.steps + 1,) + b2bar.shape[1:])
        out[:-1] += c
        out[1:] += c
        return out

    # -- tangent + second-order adjoint --------------------------------------------

    def tangent(self, cache: SweepCache, dv: np.ndarray | None, dxi: np.ndarray | None):
        """Exact tangent of the discrete solve along (dv, dxi).

        Returns the reversed tangent nodes and the tangent kick displacements
        (both needed by the second-order reverse sweep).
        """
        steps = self.tgrid.steps
        n = self.n
        dt = self.tgrid.dt
        rot = self.rot_half
        batch_shape = ()
        if dv is not None and dv.ndim == 3:
            batch_shape = dv.shape[2:]
        if dxi is not None and dxi.ndim == 2:
            batch_shape = dxi.shape[1:]
        x = np.zeros((2 * n,) + batch_shape)
        if dxi is not None:
            x = x + dxi
            x[n:] *= -1.0
        src = reversed_source_midpoints(dv) if dv is not None else None
        rdot = np.empty((steps + 1,) + x.shape)
        a1dot = np.empty((steps, n) + batch_shape)
        rdot[0] = x
        kick_disp = cache.kick_disp
        for j in range(steps):
            x = rot.apply(x)
            a1dot[j] = x[:n]
            if self.cubic_on:
                x[n:] -= dt * self.grid.linearized_cubic(kick_disp[j], x[:n])
            if src is not None:
                x[n:] += dt * src[j]
            x = rot.apply(x)
            rdot[j + 1] = x
        return rdot, a1dot

    def _node_seed_dots(self, rdot: np.ndarray) -> np.ndarray:
        """Tangent of the cost seeds: the quadratic part of the cost only."""
        wdot = _flip_rows(rdot[::-1])
        cw = _apply_rows(self.meas.matrix, wdot)
        seeds_w = self.alpha * _apply_rows(
            self.meas.matrix.T, self.weights.reshape((-1, 1) + (1,) * (cw.ndim - 2)) * cw
        )
        if wdot.ndim == 2:
            seeds_w[0] += self.gram * wdot[0]
        else:
            seeds_w[0] += self.gram[:, None] * wdot[0]
        return _flip_rows(seeds_w[::-1])

    def hessian_product(
        self,
        cache: SweepCache,
        dv: np.ndarray | None,
        dxi: np.ndarray | None,
        full_newton: bool = True,
    ):
        """Joint Hessian-vector product of the discrete cost at the cache point.

        With full_newton the exact second derivative is produced (the terms
        coupling the cost residuals to the curvature of the solution map are
        kept, which requires the first-order adjoint at the cache point);
        without it the Gauss-Newton part is returned, which is positive
        definite everywhere and is what the outer solver iterates on.
        Returns (H dv-part as trapezoid representative, H dxi-part as
        energy Riesz representative).
        """
        steps = self.tgrid.steps
        n = self.n
        dt = self.tgrid.dt
        rot = self.rot_half
        if full_newton and self.cubic_on and cache.b2bar is None:
            self.gradient(cache)
        rdot, a1dot = self.tangent(cache, dv, dxi)
        seeds = self._node_seed_dots(rdot)
        kick_disp = cache.kick_disp
        b2bar = cache.b2bar
        batch_shape = rdot.shape[2:]
        b2bardot = np.empty((steps, n) + batch_shape)
        mu = seeds[steps].copy()
        for j in range(steps - 1, -1, -1):
            y1 = rot.apply_transpose(mu)
            b2 = y1[n:]
            b2bardot[j] = b2
            if self.cubic_on:
                correction = self.grid.linearized_cubic(kick_disp[j], b2)
                if full_newton:
                    correction = correction + self.grid.second_linearized_cubic(
                        kick_disp[j], a1dot[j], b2bar[j]
                    )
                y1[:n] -= dt * correction
            mu = rot.apply_transpose(y1) + seeds[j]
        vpart = self._distribute_kick_bar(b2bardot)
        if vpart.ndim == 2:
            vpart = vpart / self.weights[:, None]
        else:
            vpart = vpart / self.weights[:, None, None]
        if dv is not None:
            vpart = vpart + dv
        mu = mu.copy()
        mu[n:] *= -1.0
        xipart = mu / (self.gram if mu.ndim == 1 else self.gram[:, None])
        return vpart, xipart

    # -- conveniences ---------------------------------------------------------------

    def trajectory(self, cache: SweepCache) -> Trajectory:
        return Trajectory(self.tgrid, cache.states)

    def tangent_states(self, rdot: np.ndarray) -> np.ndarray:
        """Map reversed tangent nodes to original-time stacked states."""
        return _flip_rows(rdot[::-1])
