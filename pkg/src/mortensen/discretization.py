"""Spectral Galerkin discretization of the wave energy space.

The displacement lives in the L2-orthonormal sine basis on (0, L),

    phi_k(x) = sqrt(2/L) sin(k pi x / L),    k = 1..N,

which diagonalizes the Dirichlet Laplacian with eigenvalues
lam_k = (k pi / L)^2.  A state is the coefficient pair
(displacement, velocity); the energy inner product is

    (x, y)_E = sum_k lam_k a_k(x) a_k(y) + sum_k b_k(x) b_k(y),

i.e. the H^1_0 x L^2 product.  The wave generator acts mode-wise, so its
group is applied exactly: each mode rotates at frequency w_k = sqrt(lam_k).
Cubic products are evaluated pseudo-spectrally on a dealiased physical grid;
at this problem size the sine transforms are applied as small dense matrices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class SpectralGrid:
    """Immutable description of the sine-spectral discretization.

    mode_count     number of retained sine modes N
    domain_length  interval length L (default pi, so lam_k = k^2)
    dealias_factor physical grid oversampling for pseudo-spectral products;
                   a factor of 2 makes the projected cube alias-free
                   (cubing triples the sine bandwidth)
    """

    mode_count: int
    domain_length: float = math.pi
    dealias_factor: float = 2.0
    eigenvalues: np.ndarray = field(init=False, repr=False)
    omega: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.mode_count < 1:
            raise ValidationError("mode_count: must be a positive integer")
        if self.domain_length <= 0:
            raise ValidationError("domain_length: must be positive")
        if self.dealias_factor < 1.0:
            raise ValidationError("dealias_factor: must be >= 1")
        k = np.arange(1, self.mode_count + 1, dtype=float)
        lam = (k * math.pi / self.domain_length) ** 2
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "omega", np.sqrt(lam))
        # Dealiased physical grid: M interior points of (0, L).  With
        # M >= 2N the discrete sine analysis of u^3 is exact on modes <= N.
        m_grid = max(self.mode_count, math.ceil(self.dealias_factor * self.mode_count))
        x = np.arange(1, m_grid + 1) * (self.domain_length / (m_grid + 1))
        modes = np.arange(1, self.mode_count + 1)
        synth = math.sqrt(2.0 / self.domain_length) * np.sin(
            np.outer(x, modes) * (math.pi / self.domain_length)
        )
        object.__setattr__(self, "_grid_points", x)
        object.__setattr__(self, "_synthesis", synth)
        # Quadrature weight L/(M+1) makes analysis the exact L2 projection
        # for sine polynomials of bandwidth <= M.
        object.__setattr__(self, "_quad_weight", self.domain_length / (m_grid + 1))
        object.__setattr__(self, "_analysis", self._quad_weight * synth.T)

    @property
    def grid_size(self) -> int:
        return self._grid_points.shape[0]

    @property
    def gram(self) -> np.ndarray:
        """Diagonal of the energy Gram matrix on stacked coefficients."""
        return np.concatenate([self.eigenvalues, np.ones(self.mode_count)])

    def require_dealiased_cubic(self):
        if self.dealias_factor < 1.5:
            raise ValidationError(
                "dealias_factor: must be >= 3/2 when the cubic term is enabled"
            )

    # -- pseudo-spectral products -------------------------------------------------

    def to_physical(self, coeffs: np.ndarray) -> np.ndarray:
        """Evaluate a coefficient vector (or (N, K) batch) on the grid."""
        return self._synthesis @ coeffs

    def to_coefficients(self, values: np.ndarray) -> np.ndarray:
        """L2-project grid values onto the first N sine modes."""
        return self._analysis @ values

    def cubic(self, coeffs: np.ndarray) -> np.ndarray:
        """Coefficients of the L2 projection of u^3 (dealiased)."""
        u = self._synthesis @ coeffs
        return self._analysis @ (u * u * u)

    def linearized_cubic(self, base: np.ndarray, direction: np.ndarray) -> np.ndarray:
        """Coefficients of 3 u^2 z, the derivative of the cubic at u."""
        u = self._synthesis @ base
        z = self._synthesis @ direction
        if u.ndim < z.ndim:
            u = u[:, None]
        return self._analysis @ (3.0 * u * u * z)

    def second_linearized_cubic(
        self, base: np.ndarray, p: np.ndarray, q: np.ndarray
    ) -> np.ndarray:
        """Coefficients of 6 u p q, the second derivative of the cubic."""
        u = self._synthesis @ base
        pp = self._synthesis @ p
        qq = self._synthesis @ q
        ndim = max(pp.ndim, qq.ndim)
        if u.ndim < ndim:
            u = u[:, None]
        if pp.ndim < ndim:
            pp = pp[:, None]
        if qq.ndim < ndim:
            qq = qq[:, None]
        return self._analysis @ (6.0 * u * pp * qq)

    def quartic_integral(self, coeffs: np.ndarray) -> float:
        """Exact integral of u^4 over (0, L) for bandwidth-N displacement."""
        u = self._synthesis @ coeffs
        return float(self._quad_weight * np.sum(u**4, axis=0))


@dataclass(frozen=True)
class EnergyState:
    """Coefficient pair (displacement, velocity) of a wave state."""

    displacement: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.displacement, dtype=float)
        b = np.asarray(self.velocity, dtype=float)
        if a.shape != b.shape or a.ndim != 1:
            raise ValidationError(
                "EnergyState: displacement and velocity must be 1-d arrays of equal length"
            )
        if not (np.isfinite(a).all() and np.isfinite(b).all()):
            raise ValidationError("EnergyState: coefficients must be finite")
        object.__setattr__(self, "displacement", a)
        object.__setattr__(self, "velocity", b)

    @property
    def mode_count(self) -> int:
        return self.displacement.shape[0]

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.displacement, self.velocity])

    @staticmethod
    def from_stacked(x: np.ndarray) -> "EnergyState":
        n = x.shape[0] // 2
        return EnergyState(x[:n].copy(), x[n:].copy())

    @staticmethod
    def zero(n: int) -> "EnergyState":
        return EnergyState(np.zeros(n), np.zeros(n))


def energy_inner(x: EnergyState, y: EnergyState, grid: SpectralGrid) -> float:
    if x.mode_count != y.mode_count or x.mode_count != grid.mode_count:
        raise ValidationError("energy_inner: mode count mismatch")
    return float(
        np.dot(grid.eigenvalues * x.displacement, y.displacement)
        + np.dot(x.velocity, y.velocity)
    )


def energy_norm(x: EnergyState, grid: SpectralGrid) -> float:
    return math.sqrt(max(energy_inner(x, x, grid), 0.0))


def energy_norm_stacked(x: np.ndarray, grid: SpectralGrid) -> float:
    """Energy norm of a stacked coefficient vector (or column batch)."""
    g = grid.gram
    if x.ndim == 1:
        return math.sqrt(max(float(np.dot(g * x, x)), 0.0))
    return np.sqrt(np.maximum(np.einsum("i...,i...->...", g[:, None] * x, x), 0.0))


def group_action(state: EnergyState, t: float, grid: SpectralGrid) -> EnergyState:
    """Apply the exactly norm-preserving wave group e^{At}.

    Per mode with w = sqrt(lam):
        a' =  cos(w t) a + sin(w t)/w b
        b' = -w sin(w t) a + cos(w t) b
    Valid for any real t (group, not just semigroup).
    """
    if state.mode_count != grid.mode_count:
        raise ValidationError("group_action: mode count mismatch")
    w = grid.omega
    c = np.cos(w * t)
    s = np.sin(w * t)
    a, b = state.displacement, state.velocity
    return EnergyState(c * a + (s / w) * b, -(w * s) * a + c * b)


class Rotation:
    """Precomputed group action over a fixed increment, batch-aware.

    Applies e^{At} (and its Euclidean transpose, needed by discrete adjoints)
    to stacked coefficient arrays of shape (2N,) or (2N, K).
    """

    __slots__ = ("n", "c", "s_over_w", "w_s")

    def __init__(self, grid: SpectralGrid, t: float):
        w = grid.omega
        self.n = grid.mode_count
        self.c = np.cos(w * t)
        s = np.sin(w * t)
        self.s_over_w = s / w
        self.w_s = w * s

    def apply(self, x: np.ndarray) -> np.ndarray:
        n = self.n
        a, b = x[:n], x[n:]
        if x.ndim == 1:
            c, sw, ws = self.c, self.s_over_w, self.w_s
        else:
            c, sw, ws = self.c[:, None], self.s_over_w[:, None], self.w_s[:, None]
        out = np.empty_like(x)
        out[:n] = c * a + sw * b
        out[n:] = -ws * a + c * b
        return out

    def apply_transpose(self, x: np.ndarray) -> np.ndarray:
        n = self.n
        a, b = x[:n], x[n:]
        if x.ndim == 1:
            c, sw, ws = self.c, self.s_over_w, self.w_s
        else:
            c, sw, ws = self.c[:, None], self.s_over_w[:, None], self.w_s[:, None]
        out = np.empty_like(x)
        out[:n] = c * a - ws * b
        out[n:] = sw * a + c * b
        return out

    def apply_matrix_left(self, m: np.ndarray) -> np.ndarray:
        """e^{At} M for a (2N, 2N) matrix."""
        return self.apply(m)

    def apply_matrix_right(self, m: np.ndarray) -> np.ndarray:
        """M e^{At} for a (2N, 2N) matrix (acts on columns blocks)."""
        n = self.n
        ma, mb = m[:, :n], m[:, n:]
        out = np.empty_like(m)
        out[:, :n] = ma * self.c - mb * self.w_s
        out[:, n:] = ma * self.s_over_w + mb * self.c
        return out


@dataclass(frozen=True)
class MeasurementOp:
    """Bounded linear output map C from the energy space to Y = R^m.

    The adjoint is represented through the energy Gram matrix,
    C* = G^{-1} C^T, so (C w, y)_Y = (w, C* y)_E holds to machine precision
    by construction.
    """

    matrix: np.ndarray
    grid: SpectralGrid

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[1] != 2 * self.grid.mode_count:
            raise ValidationError(
                "measurement.matrix: expected shape (m, 2N) with N = mode_count"
            )
        if not np.isfinite(m).all():
            raise ValidationError("measurement.matrix: entries must be finite")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "_adjoint", (m / self.grid.gram).T)

    @property
    def output_dim(self) -> int:
        return self.matrix.shape[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ x

    def apply_adjoint(self, y: np.ndarray) -> np.ndarray:
        return self._adjoint @ y

    def operator_norm(self) -> float:
        """Norm of C as a map (E, ||.||_E) -> (Y, euclidean)."""
        half = self.matrix / np.sqrt(self.grid.gram)
        return float(np.linalg.norm(half, 2))


def low_mode_measurement(grid: SpectralGrid, m: int) -> MeasurementOp:
    """Observe the first m displacement coefficients."""
    if not 1 <= m <= grid.mode_count:
        raise ValidationError("measurement.count: must be in [1, mode_count]")
    mat = np.zeros((m, 2 * grid.mode_count))
    mat[:m, :m] = np.eye(m)
    return MeasurementOp(mat, grid)


def velocity_probe_measurement(grid: SpectralGrid, points) -> MeasurementOp:
    """Observe the velocity field at fixed interior points."""
    pts = np.atleast_1d(np.asarray(points, dtype=float))
    if pts.size == 0 or np.any(pts <= 0) or np.any(pts >= grid.domain_length):
        raise ValidationError("measurement.points: must lie strictly inside (0, L)")
    modes = np.arange(1, grid.mode_count + 1)
    phi = math.sqrt(2.0 / grid.domain_length) * np.sin(
        np.outer(pts, modes) * (math.pi / grid.domain_length)
    )
    mat = np.concatenate([np.zeros_like(phi), phi], axis=1)
    return MeasurementOp(mat, grid)
