"""Verification suite for candidate equilibrium laws.

Covers the first-order characterisation ``Lambda(t;t) = 0``, spike-variation
difference quotients, the second-order expansion of the cost change, a
Lebesgue-averaging diagnostic and contraction probes on the residual flow that
governs uniqueness.

Verdicts are the strings ``PASS``, ``FAIL`` and ``INCONCLUSIVE``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .adjoint import adjoint_for_law, build_adjoint, capital_H
from .detsolve import EquilibriumSystem, MVSystem, _scalar_coeffs, gain_matrix, rk4_integrate, solve_P
from .errors import ConfigError, DimensionError, DomainError
from .feedback import FeedbackLaw
from .model import SpikePerturbation, TimeGrid
from .objective import MCConfig, eval_J
from .rng import normals, normals_into, restart_stream, split_seed
from .simulate import apply_spike, euler_maruyama, law_samples

PASS, FAIL, INCONCLUSIVE = "PASS", "FAIL", "INCONCLUSIVE"
PROBE_STREAM = 0xFFFF_0000_0001
LEBESGUE_STREAM = 0xFFFF_0000_0002


def combine(verdicts):
    verdicts = list(verdicts)
    if FAIL in verdicts:
        return FAIL
    if INCONCLUSIVE in verdicts:
        return INCONCLUSIVE
    return PASS


# ---------------------------------------------------------------------------
# equilibrium residual


@dataclass(frozen=True)
class EquilibriumResidual:
    sup: float
    profile: np.ndarray
    tol: float
    verdict: str

    def to_dict(self):
        return {"sup": self.sup, "profile": self.profile.tolist(), "tol": self.tol,
                "verdict": self.verdict}


def lambda_diagonal(problem, law, ensemble, adjoint=None):
    """``Lambda(t;t)`` at every knot and path, shape (paths, K+1, l)."""
    adj = adjoint or adjoint_for_law(problem, law)
    j = adj.offset(ensemble.grid)
    X, U = ensemble.X[:, :, 0], ensemble.u
    return np.stack([adj.lam(j + i, j + i, X[:, i], X[:, i], U[:, i]) for i in range(X.shape[1])], axis=1)


def equilibrium_residual(problem, law, grid, ensemble, adjoint=None, tol=1e-8):
    """Sup over knots and paths of ``|Lambda(t;t)|`` for ``law``.

    ``ensemble`` must be simulated under ``law`` on ``grid``. Without an
    explicit adjoint, the one of ``law`` is solved from its linear ODEs, so
    non-equilibrium laws are handled too.
    """
    if ensemble.grid != grid:
        raise ConfigError("ensemble was not simulated on the given grid")
    lam = lambda_diagonal(problem, law, ensemble, adjoint)
    mag = np.abs(lam).max(axis=2)
    profile = mag.max(axis=0)
    sup = float(profile.max())
    return EquilibriumResidual(sup, profile, tol, PASS if sup < tol else FAIL)


# ---------------------------------------------------------------------------
# spike variations


@numba.njit(cache=True, nogil=True)
def _spike_kernel(k0, k1, xo, streams, n_inner, j, K, h, A, B, b, C, D, S, Q, R, G,
                  al, be, ends, quad0, xa, xb, xall, lin, quad, ya, yb, yall):
    # base path plus the unit-direction responses Y[i, e] to a spike of width ends[e] - j
    l = B.shape[1]
    d = C.shape[1]
    ne = ends.shape[0]
    half = n_inner // 2
    sqh = math.sqrt(h)
    z = np.empty(max(d, 2))
    u = np.empty(l)
    Ru = np.empty(l)
    y = np.empty((l, ne))
    yn = np.empty((l, ne))
    for o in range(xo.shape[0]):
        for p in range(n_inner):
            x = xo[o]
            run = 0.0
            y[:, :] = 0.0
            for k in range(j, K):
                wq = 0.5 * h if k == j else h
                for i in range(l):
                    u[i] = al[k, i] * x + be[k, i]
                for i in range(l):
                    acc = 0.0
                    for i2 in range(l):
                        acc += R[k, i, i2] * u[i2]
                    Ru[i] = acc
                uRu = 0.0
                for i in range(l):
                    uRu += u[i] * Ru[i]
                run += wq * Q[k] * x * x + h * uRu
                for e in range(ne):
                    inside = k < ends[e]
                    for i in range(l):
                        lin[o, i, e] += wq * Q[k] * x * y[i, e]
                        if inside:
                            lin[o, i, e] += h * Ru[i]
                        for i2 in range(l):
                            quad[o, i, i2, e] += wq * Q[k] * y[i, e] * y[i2, e]
                            if inside:
                                quad[o, i, i2, e] += h * R[k, i, i2]
                normals_into(k0, k1, streams[o], p, k - j, d, z)
                for q in range(d):
                    z[q] *= sqh
                bu = 0.0
                for i in range(l):
                    bu += B[k, i] * u[i]
                xn = x + (A[k] * x + bu + b[k]) * h
                for q in range(d):
                    du = 0.0
                    for i in range(l):
                        du += D[k, q, i] * u[i]
                    xn += (C[k, q] * x + du + S[k, q]) * z[q]
                for e in range(ne):
                    w = 1.0 if k < ends[e] else 0.0
                    for i in range(l):
                        yv = y[i, e]
                        v = yv + (A[k] * yv + B[k, i] * w) * h
                        for q in range(d):
                            v += (C[k, q] * yv + D[k, q, i] * w) * z[q]
                        yn[i, e] = v
                x = xn
                y[:, :] = yn
            run += 0.5 * h * Q[K] * x * x
            quad0[o] += 0.5 * run + 0.5 * G * x * x
            xall[o] += x
            if p < half:
                xa[o] += x
            elif p < 2 * half:
                xb[o] += x
            for e in range(ne):
                for i in range(l):
                    yv = y[i, e]
                    lin[o, i, e] += 0.5 * h * Q[K] * x * yv + G * x * yv
                    for i2 in range(l):
                        quad[o, i, i2, e] += 0.5 * h * Q[K] * yv * y[i2, e] + G * yv * y[i2, e]
                    yall[o, i, e] += yv
                    if p < half:
                        ya[o, i, e] += yv
                    elif p < 2 * half:
                        yb[o, i, e] += yv


@dataclass(frozen=True, eq=False)
class SpikeMoments:
    """Per-outer sufficient statistics of one restart batch at knot ``j``.

    Every spike ``v`` on ``[t, t + eps_e)`` has a cost change that is an exact
    quadratic in ``v`` built from these sums, because the Euler scheme is
    affine in the control perturbation along fixed noise.
    """

    t: float
    eps: np.ndarray
    x: np.ndarray
    n_inner: int
    base: np.ndarray
    lin: np.ndarray
    quad: np.ndarray
    ya: np.ndarray
    yb: np.ndarray
    yall: np.ndarray
    h_weight: float
    mu_term: np.ndarray

    def delta_J(self, v):
        """Per-outer cost change for spike ``v``, shape (n_outer, n_eps)."""
        v = np.asarray(v, float)
        n = self.n_inner
        half = n // 2
        lin = np.einsum("i,oie->oe", v, self.lin)
        quad = np.einsum("i,oije,j->oe", v, self.quad, v)
        ya = np.einsum("i,oie->oe", v, self.ya) / half
        yb = np.einsum("i,oie->oe", v, self.yb) / half
        ym = np.einsum("i,oie->oe", v, self.yall) / n
        xa, xb = self.base[1][:, None] / half, self.base[2][:, None] / half
        return ((lin + 0.5 * quad) / n - 0.5 * self.h_weight * (xa * yb + ya * xb + ya * yb)
                - self.mu_term[:, None] * ym)

    def base_J(self):
        n = self.n_inner
        half = n // 2
        quad0, xa, xb, xall = self.base
        return quad0 / n - 0.5 * self.h_weight * (xa / half) * (xb / half) - self.mu_term * xall / n


def spike_moments(problem, law, t, eps_grid, x_outer, streams, n_inner, seed):
    """Run the fused base-plus-response simulation from each outer state."""
    if problem.n != 1:
        raise DimensionError("spike moments need a scalar state")
    g = law.grid
    j = g.index_of(t)
    ends = []
    for eps in eps_grid:
        w = eps / g.step
        if abs(w - round(w)) > 1e-9 or round(w) < 1:
            raise DomainError(f"eps = {eps} is not a positive multiple of the grid step {g.step}")
        if j + int(round(w)) > g.n_steps:
            raise DomainError(f"spike window [{t}, {t + eps}) exceeds the horizon")
        ends.append(j + int(round(w)))
    K = g.n_steps
    tab = {k: np.stack([cf(float(s)) for s in g.knots]) for k, cf in problem.coefficients().items()}
    al, be = law_samples(law, g.knots)
    no = x_outer.shape[0]
    l, ne = problem.l, len(ends)
    quad0, xa, xb, xall = (np.zeros(no) for _ in range(4))
    lin = np.zeros((no, l, ne))
    quad = np.zeros((no, l, l, ne))
    ya, yb, yall = (np.zeros((no, l, ne)) for _ in range(3))
    k0, k1 = split_seed(seed)
    _spike_kernel(k0, k1, np.ascontiguousarray(x_outer, dtype=float),
                  np.ascontiguousarray(streams, dtype=np.uint64), int(n_inner), j, K, g.step,
                  np.ascontiguousarray(tab["A"][:, 0, 0]), np.ascontiguousarray(tab["B"][:, :, 0]),
                  np.ascontiguousarray(tab["b"][:, 0]), np.ascontiguousarray(tab["C"][:, :, 0, 0]),
                  np.ascontiguousarray(tab["D"][:, :, 0, :]), np.ascontiguousarray(tab["sigma"][:, :, 0]),
                  np.ascontiguousarray(tab["Q"][:, 0, 0]), np.ascontiguousarray(tab["R"]),
                  float(problem.G[0, 0]), np.ascontiguousarray(al[:, :, 0]), np.ascontiguousarray(be),
                  np.asarray(ends, dtype=np.int64), quad0, xa, xb, xall, lin, quad, ya, yb, yall)
    mu = problem.mu1[0, 0] * x_outer + problem.mu2[0]
    return SpikeMoments(float(g.knots[j]), np.asarray(eps_grid, float), x_outer, int(n_inner),
                        np.stack([quad0, xa, xb, xall]), lin, quad, ya, yb, yall,
                        float(problem.h[0, 0]), mu)


@dataclass(frozen=True)
class SpikeReport:
    t: float
    v: np.ndarray
    eps: np.ndarray
    dJ: np.ndarray
    dJ_se: np.ndarray
    quotient: np.ndarray
    quotient_se: np.ndarray
    lambda_tt: np.ndarray
    H: np.ndarray
    prediction: np.ndarray
    tol: float
    verdict: str

    def to_dict(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}


def _check_eps(eps_grid):
    eps = np.asarray(eps_grid, float)
    if eps.ndim != 1 or eps.size < 1 or np.any(np.diff(eps) >= 0) or np.any(eps <= 0):
        raise ConfigError("eps grid must be positive and strictly decreasing")
    return eps


def spike_suite(problem, law, times, directions, eps_grid, config=None, tol=1e-6, resolution=None,
                adjoint=None, P=None):
    """Spike tests at every ``(t, v)`` pair, sharing one restart batch per ``t``.

    Noise-free problems are evaluated by quadrature. Otherwise outer states
    ``X*_t`` come from ``config.n_outer`` paths of the law from ``(0, x0)``;
    each restarts ``config.n_inner`` inner paths on its own stream. Base and
    spiked runs share every noise increment.

    Returns
    -------
    list of SpikeReport
        Ordered by time, then direction.
    """
    eps = _check_eps(eps_grid)
    g = law.grid
    if abs(g.t0) > 1e-12 or abs(g.t1 - problem.T) > 1e-12 * max(1.0, problem.T):
        raise DomainError("the law must be defined on [0, T]")
    directions = [np.atleast_1d(np.asarray(v, float)) for v in directions]
    adj = adjoint or adjoint_for_law(problem, law)
    P = P or solve_P(problem, g)
    if problem.noise_free:
        return _quadrature_suite(problem, law, times, directions, eps, tol, adj, P)
    config = config or MCConfig()
    config.check()
    outer = euler_maruyama(problem, law, (0.0, problem.x0), g, config.seed, config.n_outer,
                           workers=config.workers)
    reports = []
    for t in times:
        j = g.index_of(t)
        x = outer.X[:, j, 0]
        mom = spike_moments(problem, law, t, eps, x, restart_stream(j, np.arange(config.n_outer)),
                            config.n_inner, config.seed)
        lam = adj.lam(j, j, x, x, outer.u[:, j]).mean(0)
        H = capital_H(problem, P, float(g.knots[j]))
        for v in directions:
            v = np.atleast_1d(np.asarray(v, float))
            dJ_o = mom.delta_J(v)
            dJ = dJ_o.mean(0)
            se = dJ_o.std(0, ddof=1) / np.sqrt(dJ_o.shape[0])
            q, qse = dJ / eps, se / eps
            pred = eps * (lam @ v + 0.5 * v @ H @ v)
            if resolution is not None and np.any(qse > resolution):
                verdict = INCONCLUSIVE
            else:
                verdict = PASS if np.all(q >= -(3 * qse + tol)) else FAIL
            reports.append(SpikeReport(float(g.knots[j]), v, eps, dJ, se, q, qse, lam, H, pred,
                                       tol, verdict))
    return reports


def spike_test(problem, law, t, v, eps_grid, config=None, tol=1e-6, resolution=None):
    """Difference quotients ``[J(u^{t,eps,v}) - J(u*)] / eps`` on ``eps_grid``,
    averaged over ``X*_t``. Noise-free problems are evaluated by quadrature."""
    return spike_suite(problem, law, [t], [v], eps_grid, config, tol, resolution)[0]


def _base_state(problem, law, t, adj=None):
    """Noise-free state at ``t`` under ``law`` from ``(0, x0)``."""
    if t <= law.grid.t0:
        return np.array(problem.x0, float)
    adj = adj or adjoint_for_law(problem, law)
    return np.array([adj.cond_mean(law.grid.index_of(t), 0, problem.x0[0])])


def quadrature_spikes(problem, law, t, x, vs, eps):
    """Noise-free cost changes for every spike ``(v, eps)`` at once.

    Same scheme as the quadrature objective (RK4 on state plus running cost,
    i.e. Simpson's rule for the cost) with one row per spike, so the result
    equals differencing two quadrature objective values.

    Returns
    -------
    ndarray
        Shape (len(vs), len(eps)).
    """
    g = law.grid
    j = g.index_of(t)
    sub = TimeGrid(float(g.knots[j]), g.t1, g.n_steps - j)
    vs = np.atleast_2d(np.asarray(vs, float))
    nv, ne = vs.shape[0], len(eps)
    V = np.concatenate([np.zeros((1, problem.l)), np.repeat(vs, ne, axis=0)])
    hi = np.concatenate([[t], np.tile(t + np.asarray(eps, float), nv)])
    x = float(np.asarray(x).reshape(-1)[0])

    def field(s, y):
        c = problem.at(s)
        A, B, b, Q, R = c["A"][0, 0], c["B"][:, 0], c["b"][0], c["Q"][0, 0], c["R"]
        xb, xp = y[:, 0], y[:, 1]
        ub = xb[:, None] * law.alpha_at(s)[:, 0] + law.beta_at(s)
        up = ub + V * ((t <= s) & (s < hi))[:, None]
        cost = Q * xp * xp + np.einsum("pi,ij,pj->p", up, R, up)
        return np.stack([A * xb + ub @ B + b, A * xp + up @ B + b, cost], axis=1)

    y0 = np.tile([x, x, 0.0], (V.shape[0], 1))
    yT = rk4_integrate(field, (sub.t0, y0), sub, direction="forward").values[-1]
    XT, run = yT[:, 1], yT[:, 2]
    G, hm = problem.G[0, 0], problem.h[0, 0]
    vals = 0.5 * run + 0.5 * (G - hm) * XT ** 2 - (problem.mu1[0, 0] * x + problem.mu2[0]) * XT
    return (vals[1:] - vals[0]).reshape(nv, ne)


def _quadrature_suite(problem, law, times, directions, eps, tol, adj, P):
    g = law.grid
    reports = []
    zero = np.zeros_like(eps)
    for t in times:
        j = g.index_of(t)
        x = _base_state(problem, law, t, adj)
        dJ = quadrature_spikes(problem, law, t, x, directions, eps)
        lam = adj.lam(j, j, x, x, adj.control(j, x))[0]
        H = capital_H(problem, P, float(g.knots[j]))
        for v, d in zip(directions, dJ):
            q = d / eps
            reports.append(SpikeReport(float(g.knots[j]), v, eps, d, zero, q, zero, lam, H,
                                       eps * (lam @ v + 0.5 * v @ H @ v), tol,
                                       PASS if np.all(q >= -tol) else FAIL))
    return reports


# ---------------------------------------------------------------------------
# expansion check


@dataclass(frozen=True)
class ExpansionReport:
    t: float
    v: np.ndarray
    eps: np.ndarray
    dJ: np.ndarray
    dJ_se: np.ndarray
    predicted_integral: np.ndarray
    first_order: np.ndarray
    remainder: np.ndarray
    ratio: np.ndarray
    decay: np.ndarray
    relative_error: float
    mode: str
    verdict: str
    note: str = ("the decay factor 1.5 per halving is a pragmatic stand-in for an "
                 "unspecified o(eps) modulus")

    def to_dict(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}


def _simpson(f, h):
    n = f.shape[-1] - 1
    if n % 2:
        return h * (0.5 * f[..., 0] + f[..., 1:-1].sum(-1) + 0.5 * f[..., -1])
    return h / 3 * (f[..., 0] + f[..., -1] + 4 * f[..., 1:-1:2].sum(-1) + 2 * f[..., 2:-1:2].sum(-1))


def _predicted_integral(problem, adj, P, j, x, v, eps, g):
    """``int_t^{t+eps} (E_t <Lambda(s;t), v> + 1/2 <H v, v>) ds`` per outer state,
    with ``E_t`` applied analytically (``Lambda`` is affine in the state)."""
    out = np.empty((x.shape[0], eps.size))
    for e, w in enumerate(eps):
        m = int(round(w / g.step))
        vals = np.empty((x.shape[0], m + 1))
        for i in range(m + 1):
            k = j + i
            Es = adj.cond_mean(k, j, x)
            us = adj.control(k, Es)
            H = capital_H(problem, P, float(g.knots[k]) if i == 0 else float(np.nextafter(g.knots[k], g.knots[j])))
            vals[:, i] = adj.lam(k, j, Es, x, us) @ v + 0.5 * v @ H @ v
        out[:, e] = _simpson(vals, g.step)
    return out


def expansion_check(problem, law, t, v, eps_grid, config=None, decay_factor=1.5, rel_tol=0.05):
    """Compare the cost change of a spike with its second-order expansion.

    The remainder is ``dJ - int (Lambda v + 1/2 H v.v) ds``. Noise-free
    problems use quadrature and pass when ``|remainder| / eps`` shrinks by at
    least ``decay_factor`` per halving over the last three ``eps`` and the
    first-order prediction ``eps (Lambda v + 1/2 H v.v)`` is within
    ``rel_tol`` of ``dJ`` at the smallest ``eps``. Noisy problems pass when
    the remainders at the three smallest ``eps`` lie within three standard
    errors of zero.
    """
    eps = _check_eps(eps_grid)
    v = np.atleast_1d(np.asarray(v, float))
    g = law.grid
    j = g.index_of(t)
    adj = adjoint_for_law(problem, law)
    P = solve_P(problem, g)
    H_t = capital_H(problem, P, float(g.knots[j]))
    if problem.noise_free:
        x = _base_state(problem, law, t, adj)
        rep = _quadrature_suite(problem, law, [t], [v], eps, 0.0, adj, P)[0]
        dJ, se = rep.dJ, np.zeros_like(eps)
        pred_int = _predicted_integral(problem, adj, P, j, x, v, eps, g)[0]
        lam = rep.lambda_tt
        mode = "noise-free-quadrature"
    else:
        config = config or MCConfig()
        outer = euler_maruyama(problem, law, (0.0, problem.x0), g, config.seed, config.n_outer,
                               workers=config.workers)
        x = outer.X[:, j, 0]
        mom = spike_moments(problem, law, t, eps, x, restart_stream(j, np.arange(config.n_outer)),
                            config.n_inner, config.seed)
        pred_o = _predicted_integral(problem, adj, P, j, x, v, eps, g)
        rem_o = mom.delta_J(v) - pred_o
        dJ_o = mom.delta_J(v)
        dJ = dJ_o.mean(0)
        se = rem_o.std(0, ddof=1) / np.sqrt(rem_o.shape[0])
        pred_int = pred_o.mean(0)
        lam = adj.lam(j, j, x, x, outer.u[:, j]).mean(0)
        mode = "monte-carlo"
    first = eps * (lam @ v + 0.5 * v @ H_t @ v)
    rem = dJ - pred_int
    ratio = rem / eps
    decay = np.abs(ratio[:-1]) / np.maximum(np.abs(ratio[1:]), 1e-300)
    rel = float(abs(first[-1] - dJ[-1]) / max(abs(dJ[-1]), 1e-300))
    if mode == "noise-free-quadrature":
        ok_decay = bool(np.all(decay[-2:] >= decay_factor)) or bool(np.all(np.abs(rem[-3:]) < 1e-14))
        ok_first = rel < rel_tol or bool(np.all(v == 0))
        verdict = PASS if ok_decay and ok_first else FAIL
    else:
        # the remainder is o(eps), not zero, so only the smallest widths are banded
        verdict = PASS if np.all(np.abs(rem[-3:]) <= 3 * se[-3:] + 1e-12) else FAIL
    return ExpansionReport(float(t), v, eps, dJ, se, pred_int, first, rem, ratio, decay, rel, mode,
                           verdict)


# ---------------------------------------------------------------------------
# Lebesgue averaging diagnostic


@dataclass(frozen=True)
class TestProcess:
    """Process with analytic conditional mean ``E_t[Y_s] = mean(t, s, W_t)``."""

    name: str
    value: object
    cond_mean: object
    rate: float


TEST_PROCESSES = {
    "martingale": TestProcess("martingale", lambda t, w: w, lambda t, s, w: w, 0.0),
    "w-squared": TestProcess("w-squared", lambda t, w: w * w, lambda t, s, w: w * w + (s - t), 0.5),
    "drift": TestProcess("drift", lambda t, w: t + 0.0 * w, lambda t, s, w: s + 0.0 * w, 0.5),
}


@dataclass(frozen=True)
class LebesgueReport:
    rows: list
    verdict: str

    def to_dict(self):
        return {"rows": self.rows, "verdict": self.verdict}


def lebesgue_check(process="all", t_grid=(0.0, 0.25, 0.5, 0.75), eps_grid=None, seed=0,
                   npaths=16, nodes=1, tol=1e-12):
    """Error of ``(1/eps) int_t^{t+eps} E_t[Y_s] ds - Y_t`` per ``(t, eps)``.

    ``W_t`` is sampled exactly (``sqrt(t) Z``) and the time average of the
    analytic conditional mean is taken with ``nodes``-point Gauss-Legendre;
    one node suffices because the shipped conditional means are affine in
    ``s``. ``error / eps`` must equal the process's analytic rate (0 or 1/2)
    to within ``tol``.
    """
    names = list(TEST_PROCESSES) if process == "all" else [process]
    eps = _check_eps(eps_grid if eps_grid is not None else [2.0 ** -k for k in range(3, 10)])
    xg, wg = np.polynomial.legendre.leggauss(nodes)
    wg = wg / 2.0
    rows = []
    ok = True
    for name in names:
        proc = TEST_PROCESSES[name]
        for i, t in enumerate(t_grid):
            w = math.sqrt(t) * normals(seed, LEBESGUE_STREAM, np.arange(npaths), i, 1)[:, 0]
            y = proc.value(t, w)
            for e in eps:
                s = t + e * (xg + 1.0) / 2.0
                avg = sum(wk * proc.cond_mean(t, sk, w) for sk, wk in zip(s, wg))
                err = avg - y
                expected = proc.rate * e
                dev = float(np.max(np.abs(err - expected)))
                exact = bool(np.all(err == 0.0)) if proc.rate == 0.0 else True
                ok &= exact and dev <= tol
                rows.append({"process": name, "t": float(t), "eps": float(e),
                             "error": float(np.max(np.abs(err))), "expected": float(expected),
                             "deviation": dev})
    return LebesgueReport(rows, PASS if ok else FAIL)


# ---------------------------------------------------------------------------
# uniqueness probes


@dataclass(frozen=True, eq=False)
class ResidualFlow:
    """Two-time field ``pbar(s;t)`` on ``{t <= s}`` with its sweep history.

    ``p[kt, ks]`` holds ``pbar(s_ks; t_kt)`` (NaN above the diagonal);
    ``k`` is the matching martingale field, identically zero in the
    noise-free reduction.
    """

    grid: TimeGrid
    p: np.ndarray
    k: np.ndarray
    windows: list
    history: list
    ratios: list
    c3: float
    delta: float
    verdict: str
    message: str = ""

    @property
    def sup_norm(self):
        return float(np.nanmax(np.abs(self.p))) if np.any(np.isfinite(self.p)) else 0.0

    def to_dict(self):
        return {"windows": self.windows, "history": self.history, "ratios": self.ratios,
                "c3": self.c3, "delta": self.delta, "final_sup": self.sup_norm,
                "verdict": self.verdict, "message": self.message}


def _random_triangle(grid, k_lo, k_hi, seed, stream=PROBE_STREAM):
    """Unit sup-norm random field on ``k_lo <= kt <= ks <= k_hi`` with zero
    terminal column."""
    n = k_hi - k_lo + 1
    z = normals(seed, stream, np.arange(n * n), k_lo, 1)[:, 0].reshape(n, n)
    z = np.triu(z)
    z[:, -1] = 0.0
    m = np.abs(z).max()
    return z / m if m > 0 else z


def lq_kappa(problem, sys, s, M, N):
    A, B, b, C, D, sig, Q, R = _scalar_coeffs(problem, s)
    S = gain_matrix(R, M, D)
    if not (B.any() or D.any()):
        return 0.0
    w = np.linalg.solve(S, B)
    return float(((M - N) * B + M * (D.T @ C)) @ w)


def estimate_c3(problem, sys):
    """Heuristic Lipschitz bound ``2 sup|A| + sup|kappa|`` of the noise-free
    residual drift; an upper-bound proxy, not a sharp constant."""
    g = sys.grid
    kap = [abs(lq_kappa(problem, sys, float(s), sys.M[k], sys.N[k])) for k, s in enumerate(g.knots)]
    return 2 * problem.A.max_norm + max(kap)


def _sweep_windows(K, n_win):
    edges = np.linspace(0, K, n_win + 1).round().astype(int)
    return [(int(edges[m - 1]), int(edges[m])) for m in range(n_win, 0, -1)]


def _run_probe(grid, windows, init, step_fn, max_sweeps, tol, seed):
    K = grid.n_steps
    field_p = np.full((K + 1, K + 1), np.nan)
    iu = np.triu_indices(K + 1)
    field_p[iu] = 0.0
    history, ratios = [], []
    verdict, message = PASS, ""
    for lo, hi in windows:
        if init == "zero":
            blk = np.zeros((hi - lo + 1, hi - lo + 1))
        elif init == "random":
            blk = _random_triangle(grid, lo, hi, seed)
        else:
            blk = np.asarray(init(lo, hi), float)
        hist = [float(np.abs(blk).max())]
        rat = []
        bad = 0
        for _ in range(max_sweeps):
            if hist[-1] < tol:
                break
            blk = step_fn(lo, hi, blk)
            hist.append(float(np.abs(blk).max()))
            if hist[-2] > 0:
                rat.append(hist[-1] / hist[-2])
                bad = bad + 1 if rat[-1] >= 1.0 else 0
            if bad >= 3:
                verdict, message = FAIL, f"no contraction on window [{grid.knots[lo]}, {grid.knots[hi]}]"
                break
        if hist[-1] >= tol and verdict == PASS:
            verdict, message = FAIL, f"window [{grid.knots[lo]}, {grid.knots[hi]}] did not reach {tol}"
        n = hi - lo + 1
        sub = np.triu(np.ones((n, n), bool))
        view = field_p[lo:hi + 1, lo:hi + 1]
        view[sub] = blk[sub]
        history.append(hist)
        ratios.append(rat)
    return field_p, history, ratios, verdict, message


def uniqueness_probe_lq(problem, sys, grid=None, init="random", delta=None, max_sweeps=50,
                        tol=1e-10, seed=0):
    """Sweep iteration on the noise-free residual flow of an LQ equilibrium.

    With ``kbar = 0`` the residual satisfies, for each fixed ``t``::

        d/ds pbar(s;t) = -A pbar(s;t) + kappa(s) pbar(s;s),   pbar(T_m;t) = 0
        kappa = [(M - N) B' + M C'D] (R + M D'D)^-1 B

    on windows ``[T_m - delta, T_m]`` processed backward. One sweep freezes the
    diagonal, integrates every ``t``-slice backward by RK4 (diagonal linearly
    interpolated at midpoints) and then refreshes the diagonal.

    ``delta`` defaults to the largest ``T / m`` below ``1 / (4 c3)``.
    """
    if not isinstance(sys, EquilibriumSystem):
        raise ConfigError("the LQ probe needs an EquilibriumSystem")
    grid = grid or sys.grid
    if grid != sys.grid:
        raise ConfigError("probe grid must match the system grid")
    K = grid.n_steps
    c3 = estimate_c3(problem, sys)
    T = grid.t1 - grid.t0
    if delta is None:
        n_win = max(1, math.ceil(4 * c3 * T * (1 + 1e-9)))
    else:
        n_win = max(1, int(round(T / delta)))
    delta = T / n_win
    windows = _sweep_windows(K, n_win)
    h = grid.step
    knots = grid.knots
    A_k = np.array([problem.A(float(s))[0, 0] for s in knots])
    A_m = np.array([problem.A(float(s))[0, 0] for s in grid.midpoints])
    kap_k = np.array([lq_kappa(problem, sys, float(s), sys.M[k], sys.N[k]) for k, s in enumerate(knots)])
    kap_m = np.array([lq_kappa(problem, sys, float(s), sys.M.mid[c], sys.N.mid[c])
                      for c, s in enumerate(grid.midpoints)])
    # one-sided values at cell ends (coefficients may jump on a knot)
    kap_e = np.array([lq_kappa(problem, sys, float(np.nextafter(knots[c + 1], knots[c])),
                               sys.M[c + 1], sys.N[c + 1]) for c in range(K)])
    A_e = np.array([problem.A(float(np.nextafter(knots[c + 1], knots[c])))[0, 0] for c in range(K)])

    def step(lo, hi, blk):
        diag = np.diag(blk).copy()
        n = hi - lo + 1
        new = np.zeros_like(blk)
        y = np.zeros(n)
        # backward over cells [c, c+1], all slices at once; slice kt is live while kt <= c
        for c in range(hi - 1, lo - 1, -1):
            i = c - lo
            d1, d0 = diag[i + 1], diag[i]
            dm = 0.5 * (d0 + d1)
            ya = y[: i + 1]
            f = lambda a, kp, dd, yy: -a * yy + kp * dd
            k1 = f(A_e[c], kap_e[c], d1, ya)
            k2 = f(A_m[c], kap_m[c], dm, ya - 0.5 * h * k1)
            k3 = f(A_m[c], kap_m[c], dm, ya - 0.5 * h * k2)
            k4 = f(A_k[c], kap_k[c], d0, ya - h * k3)
            y[: i + 1] = ya - h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            new[: i + 1, i] = y[: i + 1]
        return new

    p, history, ratios, verdict, message = _run_probe(grid, windows, init, step, max_sweeps, tol, seed)
    k = np.zeros(p.shape + (problem.d,))
    return ResidualFlow(grid, p, k, [(float(knots[a]), float(knots[b])) for a, b in windows],
                        history, ratios, float(c3), float(delta), verdict, message)


def uniqueness_probe_mv(market, sys, grid=None, init="random", delta=None, max_sweeps=50,
                        tol=1e-10, seed=0):
    """Probe for the mean-variance residual flow with deterministic ``theta``.

    Taking ``E_t`` of the residual equation leaves, on every ``t``-slice, the
    homogeneous Volterra equation ``m(s;t) = int_s^T r m(nu;t) dnu``. Each sweep
    applies that map (trapezoid quadrature, backward from the window end) to
    all slices and then reads off the diagonal ``pbar(t;t) = m(t;t)``, which
    the iteration drives to zero. Windows default to the whole horizon.
    """
    if not isinstance(sys, MVSystem):
        raise ConfigError("the mean-variance probe needs an MVSystem")
    grid = grid or sys.grid
    K = grid.n_steps
    T = grid.t1 - grid.t0
    n_win = 1 if delta is None else max(1, int(round(T / delta)))
    delta = T / n_win
    windows = _sweep_windows(K, n_win)
    h = grid.step
    r_k = np.array([market.r(float(s)) for s in grid.knots])
    r_e = np.array([market.r(float(np.nextafter(grid.knots[c + 1], grid.knots[c]))) for c in range(K)])
    c3 = float(market.r.max_norm)

    def step(lo, hi, blk):
        new = np.zeros_like(blk)
        acc = np.zeros(hi - lo + 1)
        for c in range(hi - 1, lo - 1, -1):
            i = c - lo
            acc[: i + 1] += 0.5 * h * (r_e[c] * blk[: i + 1, i + 1] + r_k[c] * blk[: i + 1, i])
            new[: i + 1, i] = acc[: i + 1]
        return new

    p, history, ratios, verdict, message = _run_probe(grid, windows, init, step, max_sweeps, tol, seed)
    k = np.zeros(p.shape + (market.d,))
    return ResidualFlow(grid, p, k, [(float(grid.knots[a]), float(grid.knots[b])) for a, b in windows],
                        history, ratios, c3, float(delta), verdict, message)


def discounting_check(market, grid, seed=0):
    """Solve ``d/ds q = -r q`` backward from random terminal values and compare
    the discounted solution with the ``r = 0`` solution (a constant).

    Returns the max-norm gap.
    """
    z = normals(seed, PROBE_STREAM, np.arange(8), grid.n_steps + 1, 1)[:, 0]
    sol = rk4_integrate(lambda s, y: -market.r(s) * y, (grid.t1, z), grid)
    disc = rk4_integrate(lambda s, y: -market.r(s) * y, (grid.t1, np.ones(1)), grid)
    undiscounted = rk4_integrate(lambda s, y: 0.0 * y, (grid.t1, z), grid)
    return float(np.abs(sol.values / disc.values - undiscounted.values).max())
