"""First-order adjoint ``(p(.;t), k)`` in closed affine form, the sensitivity
``Lambda(s;t)``, the second-order weight ``H``, and pathwise BSDE checks.

For an affine law ``u = a X + c`` (scalar state) the adjoint is::

    p(s;t) = m_s X_s - nu_s E_t[X_s] - g_s X_t + phi_s
    k(s)   = m_s (C_s X_s + D_s u_s + sigma_s)

with backward linear ODEs for ``(m, nu, g, phi)``. On the equilibrium these
coincide with ``(M, N, Gamma1, Phi)``. Conditional means come from the
analytic mean flow, never from nested sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .detsolve import EquilibriumSystem, MVSystem, Trajectory, _scalar_coeffs, rk4_integrate
from .errors import ConfigError, DimensionError
from .simulate import MeanFlow, law_samples


def _coeff_knots(problem, knots):
    return {k: np.stack([cf(float(s)) for s in knots]) for k, cf in problem.coefficients().items()}


@dataclass(frozen=True, eq=False)
class AdjointAnsatz:
    """Closed-form adjoint evaluators on the knots of ``grid`` (scalar state).

    ``m, nu, g, phi`` are the coefficient trajectories; ``mean`` is the
    conditional-mean flow of the law.
    """

    problem: object
    law: object
    m: Trajectory
    nu: Trajectory
    g: Trajectory
    phi: Trajectory
    mean: MeanFlow

    @property
    def grid(self):
        return self.law.grid

    def __post_init__(self):
        F, Psi = self.mean.knot_arrays()
        tab = _coeff_knots(self.problem, self.grid.knots)
        a, c = law_samples(self.law, self.grid.knots)
        object.__setattr__(self, "_F", F)
        object.__setattr__(self, "_Psi", Psi)
        object.__setattr__(self, "_tab", tab)
        object.__setattr__(self, "_a", a[:, :, 0])
        object.__setattr__(self, "_c", c)

    def offset(self, grid):
        """Knot index of ``grid.t0`` in the adjoint grid (steps must agree)."""
        if abs(grid.step - self.grid.step) > 1e-9 * self.grid.step:
            raise ConfigError("path grid and adjoint grid have different steps")
        return self.grid.index_of(grid.t0)

    def cond_mean(self, ks, kt, Xt):
        """``E_t[X_s]`` for knot indices ``kt <= ks``."""
        phi1 = self._F[ks] / self._F[kt]
        return phi1 * Xt + (self._Psi[ks] - phi1 * self._Psi[kt])

    def control(self, ks, Xs):
        return Xs[..., None] * self._a[ks] + self._c[ks]

    def p(self, ks, kt, Xs, Xt):
        E = self.cond_mean(ks, kt, Xt)
        return self.m[ks] * Xs - self.nu[ks] * E - self.g[ks] * Xt + self.phi[ks]

    def k(self, ks, Xs, us):
        """``k(s)`` per path, shape (..., d); independent of ``t``."""
        C, D, sig = self._tab["C"][ks][:, 0, 0], self._tab["D"][ks][:, 0, :], self._tab["sigma"][ks][:, 0]
        return self.m[ks] * (Xs[..., None] * C + us @ D.T + sig)

    def lam(self, ks, kt, Xs, Xt, us):
        """``Lambda(s;t) = B p(s;t) + sum_j D_j' k_j(s) + R u_s``, shape (..., l)."""
        B = self._tab["B"][ks][:, 0]
        D = self._tab["D"][ks][:, 0, :]
        R = self._tab["R"][ks]
        p = self.p(ks, kt, Xs, Xt)
        return p[..., None] * B + self.k(ks, Xs, us) @ D + us @ R.T

    def terminal_gap(self, kt, XT, Xt):
        """``p(T;t)`` minus its prescribed terminal value (analytic mean)."""
        K = self.grid.n_steps
        pr = self.problem
        E = self.cond_mean(K, kt, Xt)
        target = pr.G[0, 0] * XT - pr.h[0, 0] * E - pr.mu1[0, 0] * Xt - pr.mu2[0]
        return self.p(K, kt, XT, Xt) - target


def _traj(tr, i=None):
    if i is None:
        return tr
    return Trajectory(tr.grid, tr.values[:, i], tr.slope_start[:, i], tr.slope_end[:, i])


def _mv_to_lq(sys):
    diff = Trajectory(sys.grid, sys.Gamma2.values - sys.Gamma3.values,
                      sys.Gamma2.slope_start - sys.Gamma3.slope_start,
                      sys.Gamma2.slope_end - sys.Gamma3.slope_end)
    return sys.M, sys.M, sys.Gamma1, diff


def build_adjoint(problem, sys, law):
    """Adjoint ansatz for the equilibrium law built from ``sys``.

    ``sys`` may be an :class:`EquilibriumSystem` or, with ``problem`` the
    embedded market, an :class:`MVSystem` (then ``M`` plays both ``M`` and
    ``N`` and ``Phi = Gamma2 - Gamma3``).
    """
    if problem.n != 1:
        raise DimensionError("n must be 1 for the closed-form adjoint")
    if law.n != problem.n or law.l != problem.l:
        raise ConfigError(f"law has shape (l={law.l}, n={law.n}), problem has (l={problem.l}, n={problem.n})")
    if isinstance(sys, EquilibriumSystem):
        m, nu, g, phi = sys.M, sys.N, sys.Gamma1, sys.Phi
    elif isinstance(sys, MVSystem):
        m, nu, g, phi = _mv_to_lq(sys)
    else:
        raise ConfigError(f"unsupported system type {type(sys).__name__}")
    if sys.grid != law.grid:
        raise ConfigError("system and law must share a grid")
    return AdjointAnsatz(problem, law, m, nu, g, phi, MeanFlow(problem, law))


def adjoint_for_law(problem, law):
    """Adjoint ansatz for an arbitrary affine law, from its linear ODEs::

        m'   = -(2A + |C|^2) m - m (B' + C'D) a - Q,            m(T) = G
        nu'  = -2A nu - nu B'a,                                 nu(T) = h
        g'   = -A g,                                            g(T) = mu1
        phi' = -A phi - [(m - nu) B' + m C'D] c - (m - nu) b - m C' sigma,
                                                                phi(T) = -mu2
    """
    if problem.n != 1:
        raise DimensionError("n must be 1 for the closed-form adjoint")
    grid = law.grid

    def field(s, y):
        A, B, b, C, D, sig, Q, _ = _scalar_coeffs(problem, s)
        a, c = law.alpha_at(s)[:, 0], law.beta_at(s)
        m, nu, g, phi = y
        return np.array([
            -(2 * A + C @ C) * m - m * ((B + D.T @ C) @ a) - Q,
            -2 * A * nu - nu * (B @ a),
            -A * g,
            -A * phi - ((m - nu) * B + m * (D.T @ C)) @ c - (m - nu) * b - m * (C @ sig),
        ])

    y0 = np.array([problem.G[0, 0], problem.h[0, 0], problem.mu1[0, 0], -problem.mu2[0]])
    sol = rk4_integrate(field, (grid.t1, y0), grid)
    return AdjointAnsatz(problem, law, *(_traj(sol, i) for i in range(4)), MeanFlow(problem, law))


def capital_H(problem, P, s):
    """``H(s) = R_s + sum_j D_j' P(s) D_j``."""
    D = problem.D(s)
    Ps = P.P(s) if hasattr(P, "P") else P(s)
    out = problem.R(s) + sum(Dj.T @ Ps @ Dj for Dj in D)
    return 0.5 * (out + out.T)


@dataclass(frozen=True, eq=False)
class LambdaDecomposition:
    """``Lambda(s;t) = lambda1(s) + lambda2(s) xi_t`` along one or more paths.

    ``lambda1`` has shape (paths, K+1, l), ``lambda2`` (K+1, l, n) and ``xi``
    (paths, K+1, n).
    """

    lambda1: np.ndarray
    lambda2: np.ndarray
    xi: np.ndarray

    def reconstruct(self, ks, kt):
        return self.lambda1[:, ks] + self.xi[:, kt] @ self.lambda2[ks].T


def decompose_lambda(problem, adjoint, psi, path):
    """Split ``Lambda`` along simulated paths into the ``t``-free part
    ``lambda1`` and the deterministic ``lambda2 = B psi^-1`` acting on
    ``xi_t = -h E_t[X_T] - mu1 X_t - mu2``.

    ``path`` is a :class:`PathEnsemble` on the adjoint grid (starting at a knot).
    """
    j = adjoint.offset(path.grid)
    K = adjoint.grid.n_steps
    ks = np.arange(j, K + 1)
    X = path.X[:, :, 0]
    U = path.u
    B = adjoint._tab["B"][ks][:, :, 0]
    psi_inv = psi.psi_inv.values[ks]
    lam2 = np.einsum("kl,kn->kln", B, psi_inv[:, 0, :])
    ET = adjoint.cond_mean(K, ks[None, :], X)
    xi = -problem.h[0, 0] * ET - problem.mu1[0, 0] * X - problem.mu2[0]
    diag = np.stack([adjoint.lam(k, k, X[:, i], X[:, i], U[:, i]) for i, k in enumerate(ks)], axis=1)
    lam1 = diag - xi[:, :, None] * lam2[None, :, :, 0]
    return LambdaDecomposition(lam1, lam2, xi[:, :, None])


@dataclass(frozen=True)
class ResidualReport:
    t: float
    mean: np.ndarray
    std_error: np.ndarray
    rms: np.ndarray
    defect: np.ndarray
    max_abs_mean: float
    max_defect: float
    order_constant: float
    max_z: float
    z_critical: float
    passed: bool

    def to_dict(self, config_hash=None):
        return {"t": self.t,
                "per_knot": {"mean": self.mean.tolist(), "std_error": self.std_error.tolist(),
                             "rms": self.rms.tolist(), "defect": self.defect.tolist()},
                "max_abs_mean": self.max_abs_mean, "max_defect": self.max_defect,
                "order_constant": self.order_constant, "max_z": self.max_z,
                "z_critical": self.z_critical, "passed": self.passed, "config_hash": config_hash}


def _cell_residuals(adjoint, kt, X, U, dW, Xt, h):
    K = adjoint.grid.n_steps
    ks = np.arange(kt, K + 1)
    tab = adjoint._tab
    P = np.stack([adjoint.p(k, kt, X[:, i], Xt) for i, k in enumerate(ks)], axis=1)
    Kk = np.stack([adjoint.k(k, X[:, i], U[:, i]) for i, k in enumerate(ks)], axis=1)
    A = tab["A"][ks][:, 0, 0]
    C = tab["C"][ks][:, :, 0, 0]
    Q = tab["Q"][ks][:, 0, 0]
    drift = A * P + np.einsum("pkd,kd->pk", Kk, C) + Q * X
    res = P[:, 1:] - P[:, :-1] + 0.5 * (drift[:, 1:] + drift[:, :-1]) * h
    if dW is not None:
        res = res - np.einsum("pkd,pkd->pk", Kk[:, :-1], dW)
    return res


def bsde_residual(problem, adjoint, ensemble, t, level=0.0027, tol=1e-6):
    """Pathwise defect of ``dp = -(A p + C'k + Q X) ds + k'dW`` along ``ensemble``.

    Per cell: ``r_k = p(s_{k+1};t) - p(s_k;t) + drift * ds - k(s_k)'dW_k``, the
    drift averaged over both cell ends. Because every term is affine in the
    state, ``E_t[r_k]`` equals the same expression on the noise-free Euler
    recursion started from ``X_t`` (the ``defect``), which carries the
    second-order local error of the Euler scheme and nothing else if the
    adjoint drift is right.

    The report passes when ``max |defect| < tol`` and every per-knot mean of
    ``r_k - defect_k`` lies within a Bonferroni band (family level ``level``)
    of its standard error.
    """
    j0 = adjoint.offset(ensemble.grid)
    g = ensemble.grid
    kt_local = g.index_of(t)
    kt = j0 + kt_local
    h = g.step
    X = ensemble.X[:, kt_local:, 0]
    Xt = X[:, 0]
    res = _cell_residuals(adjoint, kt, X, ensemble.u[:, kt_local:], ensemble.dW[:, kt_local:], Xt, h)

    # noise-free Euler recursion from each X_t
    tab = adjoint._tab
    K = adjoint.grid.n_steps
    Xb = np.empty_like(X)
    Ub = np.empty_like(ensemble.u[:, kt_local:])
    Xb[:, 0] = Xt
    for i, k in enumerate(range(kt, K + 1)):
        Ub[:, i] = adjoint.control(k, Xb[:, i])
        if k == K:
            break
        Xb[:, i + 1] = Xb[:, i] + (tab["A"][k][0, 0] * Xb[:, i] + Ub[:, i] @ tab["B"][k][:, 0]
                                   + tab["b"][k][0]) * h
    defect_paths = _cell_residuals(adjoint, kt, Xb, Ub, None, Xt, h)
    defect = defect_paths.mean(0)

    centred = res - defect_paths
    npaths = res.shape[0]
    mean = res.mean(0)
    rms = np.sqrt((res ** 2).mean(0))
    cmean = centred.mean(0)
    se = centred.std(0, ddof=1) / np.sqrt(npaths) if npaths > 1 else np.zeros_like(mean)
    zc = float(norm.isf(0.5 * level / mean.size))
    if np.any(se > 0):
        z = np.abs(cmean) / np.where(se > 0, se, np.inf)
        max_z = float(z.max())
    else:
        max_z = float(0.0 if np.all(np.abs(cmean) < 1e-13 * (1 + rms)) else np.inf)
    max_def = float(np.abs(defect_paths).max())
    passed = max_z <= zc and max_def < tol
    return ResidualReport(float(t), mean, se, rms, defect, float(np.abs(mean).max()), max_def,
                          max_def / h ** 2, max_z, zc, bool(passed))
