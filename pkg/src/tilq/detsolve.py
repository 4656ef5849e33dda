"""Backward ODE solvers: the coupled equilibrium system, the psi-flow, the
second-order adjoint with deterministic coefficients, and the mean-variance
system with a deterministic risk premium.

All solvers use fixed-step classical RK4 on a uniform :class:`TimeGrid`. Stage
times at the two ends of a step are nudged one ulp into the step, so
coefficients that jump on a grid knot are read from the cell being integrated.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import BlowupError, DimensionError, DomainError, IntegrationError, PositivityError, SingularGainError
from .model import TimeGrid

BLOWUP = 1e150


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Values at every knot plus one-sided slopes at both ends of each cell.

    Between knots the trajectory is the cubic Hermite interpolant built from
    those slopes, which keeps fourth-order accuracy off the grid even when the
    coefficients jump on a knot.
    """

    grid: TimeGrid
    values: np.ndarray
    slope_start: np.ndarray | None = None
    slope_end: np.ndarray | None = None

    @property
    def shape(self):
        return self.values.shape[1:]

    def __getitem__(self, k):
        return self.values[k]

    def __call__(self, s):
        g = self.grid
        c = g.cell_of(s)
        y0, y1 = self.values[c], self.values[c + 1]
        h = g.step
        th = (s - g.knots[c]) / h
        if self.slope_start is None:
            return (1 - th) * y0 + th * y1
        m0, m1 = self.slope_start[c] * h, self.slope_end[c] * h
        th2, th3 = th * th, th * th * th
        return ((2 * th3 - 3 * th2 + 1) * y0 + (th3 - 2 * th2 + th) * m0
                + (-2 * th3 + 3 * th2) * y1 + (th3 - th2) * m1)

    @cached_property
    def mid(self):
        """Values at the cell midpoints."""
        y0, y1 = self.values[:-1], self.values[1:]
        if self.slope_start is None:
            out = 0.5 * (y0 + y1)
        else:
            out = 0.5 * (y0 + y1) + self.grid.step * (self.slope_start - self.slope_end) / 8.0
        out.setflags(write=False)
        return out


def _inward(a, b):
    return np.nextafter(a, b), np.nextafter(b, a)


def rk4_integrate(field, boundary, grid, direction="backward"):
    """Integrate ``y' = field(s, y)`` over every cell of ``grid``.

    Parameters
    ----------
    field : callable
        ``field(s, y) -> dy/ds`` with ``y`` an array of any fixed shape.
    boundary : tuple
        ``(time, value)``; ``time`` must be ``grid.t1`` for a backward sweep and
        ``grid.t0`` for a forward one. The value is reproduced exactly there.
    grid : TimeGrid
    direction : {"backward", "forward"}

    Returns
    -------
    Trajectory

    Raises
    ------
    IntegrationError
        When the field returns a non-finite value; the message names the knot.
    """
    t_anchor, y0 = boundary
    y = np.array(y0, dtype=float)
    K = grid.n_steps
    knots = grid.knots
    if direction == "backward":
        if abs(t_anchor - grid.t1) > 1e-12 * max(1.0, abs(grid.t1)):
            raise DomainError("backward integration must be anchored at the grid end")
        order = range(K - 1, -1, -1)
    elif direction == "forward":
        if abs(t_anchor - grid.t0) > 1e-12 * max(1.0, abs(grid.t0)):
            raise DomainError("forward integration must be anchored at the grid start")
        order = range(K)
    else:
        raise ValueError(f"direction must be 'forward' or 'backward', not {direction!r}")

    values = np.empty((K + 1,) + y.shape)
    s_start = np.empty((K,) + y.shape)
    s_end = np.empty((K,) + y.shape)
    backward = direction == "backward"
    values[K if backward else 0] = y
    for c in order:
        a, b = (knots[c + 1], knots[c]) if backward else (knots[c], knots[c + 1])
        h = b - a
        ta, tb = _inward(a, b)
        tm = a + 0.5 * h
        k1 = field(ta, y)
        k2 = field(tm, y + 0.5 * h * k1)
        k3 = field(tm, y + 0.5 * h * k2)
        k4 = field(tb, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise IntegrationError(f"non-finite value at knot {b:.12g}", time=float(b))
        k_end = field(tb, y)
        if backward:
            values[c] = y
            s_end[c], s_start[c] = k1, k_end
        else:
            values[c + 1] = y
            s_start[c], s_end[c] = k1, k_end
    for arr in (values, s_start, s_end):
        arr.setflags(write=False)
    return Trajectory(grid, values, s_start, s_end)


def default_grid(T, n_steps=1000):
    return TimeGrid(0.0, float(T), n_steps)


def _check_grid(problem, grid):
    if abs(grid.t1 - problem.T) > 1e-12 * max(1.0, problem.T):
        raise DomainError(f"grid ends at {grid.t1}, problem horizon is {problem.T}")


def _scalar_coeffs(problem, s):
    """Coefficients at ``s`` flattened for the scalar-state case."""
    c = problem.at(s)
    return (c["A"][0, 0], c["B"][:, 0], c["b"][0], c["C"][:, 0, 0], c["D"][:, 0, :],
            c["sigma"][:, 0], c["Q"][0, 0], c["R"])


def gain_matrix(R, M, D):
    """``R + M D'D`` for scalar ``M`` and stacked diffusion-control matrix ``D`` (d, l)."""
    return R + M * (D.T @ D)


def solve_gain(S, rhs, R, M, B, D, s):
    """``S^-1 rhs`` after the singular-gain guard.

    Where the control enters neither drift nor diffusion (``B = D = 0``) the
    gain is irrelevant and zero is returned without inverting ``S``.
    """
    if not (B.any() or D.any()):
        return np.zeros_like(rhs)
    check_gain(S, R, M, D, s)
    if S.shape[0] == 1:
        return rhs / S[0, 0]
    return np.linalg.solve(S, rhs)


def check_gain(S, R, M, D, s):
    thr = 1e-12 * (1.0 + np.linalg.norm(R) + abs(M) * np.linalg.norm(D) ** 2)
    lam = np.linalg.eigvalsh(0.5 * (S + S.T))[0] if S.shape[0] > 1 else S[0, 0]
    if not lam > thr:
        raise SingularGainError(
            f"R + M D'D is not positive definite at s = {s:.12g} (min eigenvalue {lam:.3e})",
            time=float(s))


@dataclass(frozen=True, eq=False)
class EquilibriumSystem:
    """Solution of the coupled equilibrium ODEs for a scalar-state problem."""

    grid: TimeGrid
    M: Trajectory
    N: Trajectory
    Gamma1: Trajectory
    Phi: Trajectory
    problem: object = None

    def columns(self):
        return {"t": self.grid.knots, "M": self.M.values, "N": self.N.values,
                "Gamma1": self.Gamma1.values, "Phi": self.Phi.values}


def solve_equilibrium_system(problem, grid=None):
    """Solve the equilibrium ODE system backward from ``T``.

    ``Gamma1`` is linear and decoupled and is solved first; ``(M, N)`` are then
    integrated as one stacked system, and finally the linear equation for
    ``Phi``. Requires a scalar state.

    Raises
    ------
    DimensionError
        If ``problem.n != 1``.
    SingularGainError
        If ``R + M D'D`` loses positive definiteness during the sweep.
    BlowupError
        If a trajectory exceeds 1e150 in magnitude.
    """
    if problem.n != 1:
        raise DimensionError("n must be 1 for equilibrium construction")
    grid = grid or default_grid(problem.T)
    _check_grid(problem, grid)
    T = grid.t1

    def gamma_field(s, y):
        return -problem.A(s)[0, 0] * y

    Gamma1 = rk4_integrate(gamma_field, (T, problem.mu1[0, 0]), grid)

    def mn_field(s, y):
        A, B, _, C, D, _, Q, R = _scalar_coeffs(problem, s)
        M, N = y
        G1 = Gamma1(s)
        S = gain_matrix(R, M, D)
        alpha = -solve_gain(S, (M - N - G1) * B + M * (D.T @ C), R, M, B, D, s)
        dM = -(2 * A + C @ C) * M - Q - M * ((B + D.T @ C) @ alpha)
        dN = -2 * A * N - N * (B @ alpha)
        out = np.array([dM, dN])
        if np.any(np.abs(y) > BLOWUP):
            raise BlowupError(f"M/N blow up near s = {s:.12g}", time=float(s))
        return out

    MN = rk4_integrate(mn_field, (T, np.array([problem.G[0, 0], problem.h[0, 0]])), grid)
    M = Trajectory(grid, MN.values[:, 0], MN.slope_start[:, 0], MN.slope_end[:, 0])
    N = Trajectory(grid, MN.values[:, 1], MN.slope_start[:, 1], MN.slope_end[:, 1])

    def phi_field(s, y):
        A, B, b, C, D, sig, _, R = _scalar_coeffs(problem, s)
        Ms, Ns = M(s), N(s)
        S = gain_matrix(R, Ms, D)
        beta = -solve_gain(S, y * B + Ms * (D.T @ sig), R, Ms, B, D, s)
        return (-A * y - ((Ms - Ns) * B + Ms * (D.T @ C)) @ beta
                - (Ms - Ns) * b - Ms * (C @ sig))

    Phi = rk4_integrate(phi_field, (T, -problem.mu2[0]), grid)
    return EquilibriumSystem(grid, M, N, Gamma1, Phi, problem)


def solve_standard_riccati(problem, grid=None):
    """Time-consistent Riccati equation (the equilibrium ``M`` equation with
    ``N = Gamma1 = 0``), scalar state."""
    if problem.n != 1:
        raise DimensionError("scalar state required")
    grid = grid or default_grid(problem.T)

    def field(s, M):
        A, B, _, C, D, _, Q, R = _scalar_coeffs(problem, s)
        S = gain_matrix(R, M, D)
        k = M * B + M * (D.T @ C)
        return -(2 * A + C @ C) * M - Q + (B + D.T @ C) @ solve_gain(S, k, R, M, B, D, s) * M

    return rk4_integrate(field, (grid.t1, problem.G[0, 0]), grid)


@dataclass(frozen=True, eq=False)
class PsiFlow:
    grid: TimeGrid
    psi: Trajectory
    psi_inv: Trajectory


def solve_psi(problem, grid=None):
    """``dpsi = psi A' ds`` with ``psi(T) = I``, and its inverse from
    ``d(psi^-1) = -A' psi^-1 ds``, integrated separately."""
    grid = grid or default_grid(problem.T)
    _check_grid(problem, grid)
    eye = np.eye(problem.n)
    psi = rk4_integrate(lambda s, y: y @ problem.A(s).T, (grid.t1, eye), grid)
    psi_inv = rk4_integrate(lambda s, y: -problem.A(s).T @ y, (grid.t1, eye), grid)
    return PsiFlow(grid, psi, psi_inv)


@dataclass(frozen=True, eq=False)
class SecondOrderP:
    """Second-order adjoint; its martingale part vanishes for deterministic
    coefficients, so only ``P`` is stored."""

    grid: TimeGrid
    P: Trajectory


def solve_P(problem, grid=None):
    grid = grid or default_grid(problem.T)
    _check_grid(problem, grid)

    def field(s, P):
        P = 0.5 * (P + P.T)
        A, C, Q = problem.A(s), problem.C(s), problem.Q(s)
        out = A.T @ P + P @ A + Q
        for Cj in C:
            out = out + Cj.T @ P @ Cj
        return -0.5 * (out + out.T)

    return SecondOrderP(grid, rk4_integrate(field, (grid.t1, problem.G), grid))


@dataclass(frozen=True, eq=False)
class MVSystem:
    """Mean-variance system with deterministic risk premium; the martingale
    integrands ``U`` and ``gamma1..3`` are identically zero."""

    grid: TimeGrid
    M: Trajectory
    Gamma1: Trajectory
    Gamma2: Trajectory
    Gamma3: Trajectory
    U: np.ndarray
    gamma1: np.ndarray
    gamma2: np.ndarray
    gamma3: np.ndarray
    market: object = None

    def columns(self):
        return {"t": self.grid.knots, "M": self.M.values, "Gamma1": self.Gamma1.values,
                "Gamma2": self.Gamma2.values, "Gamma3": self.Gamma3.values}


def solve_mv_system(market, grid=None):
    """Solve ``(Gamma1, M, Gamma2, Gamma3)`` backward as one stacked system.

    Raises
    ------
    PositivityError
        If ``M`` is not strictly positive at some knot.
    """
    grid = grid or default_grid(market.T)
    if abs(grid.t1 - market.T) > 1e-12 * max(1.0, market.T):
        raise DomainError(f"grid ends at {grid.t1}, market horizon is {market.T}")

    def field(s, y):
        g1, M, g2, g3 = y
        r = market.r(s)
        th2 = float(market.theta(s) @ market.theta(s))
        spread = th2 * (g2 - g3)
        return np.array([-r * g1, -(2 * r * M + th2 * g1), -r * g2 + spread, -r * g3 + spread])

    y0 = np.array([market.mu1, 1.0, -market.mu2, 0.0])
    sol = rk4_integrate(field, (grid.t1, y0), grid)
    if np.any(sol.values[:, 1] <= 0):
        k = int(np.argmax(sol.values[:, 1] <= 0))
        raise PositivityError(f"M is not positive at s = {grid.knots[k]:.12g}", time=float(grid.knots[k]))
    parts = [Trajectory(grid, sol.values[:, i], sol.slope_start[:, i], sol.slope_end[:, i])
             for i in range(4)]
    zeros = np.zeros((len(grid), market.d))
    zeros.setflags(write=False)
    return MVSystem(grid, parts[1], parts[0], parts[2], parts[3], zeros, zeros, zeros, zeros, market)
