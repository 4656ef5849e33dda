"""Conditional objective functionals by nested Monte Carlo or by quadrature.

The LQ objective at ``(t, x)`` is::

    J = 1/2 E_t int_t^T (X'QX + u'Ru) ds + 1/2 E_t[X_T'G X_T]
        - 1/2 E_t[X_T]' h E_t[X_T] - (mu1 x + mu2)' E_t[X_T]

The product of conditional means is estimated from two independent halves of
each inner sample (``mean_a' h mean_b``), which is unbiased where the plug-in
square is not.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .detsolve import rk4_integrate
from .errors import ConfigError, DomainError
from .feedback import FeedbackLaw
from .model import TimeGrid
from .simulate import OpenLoopControl, SpikedControl, euler_maruyama, simulate_wealth

MODES = ("monte-carlo", "noise-free-quadrature")


@dataclass(frozen=True)
class MCConfig:
    n_outer: int = 4096
    n_inner: int = 64
    seed: int = 0
    grid_step: float | None = None
    workers: int | None = None

    def check(self):
        if self.n_outer < 2 or self.n_inner < 2:
            raise ConfigError(f"Monte Carlo needs at least 2 outer and 2 inner paths "
                              f"(got {self.n_outer} x {self.n_inner})")


@dataclass(frozen=True)
class JEstimate:
    value: float
    std_error: float
    npaths_outer: int
    npaths_inner: int
    mode: str
    seed: int | None = None
    per_outer: np.ndarray | None = None

    def to_dict(self, config_hash=None):
        out = {k: v for k, v in asdict(self).items() if k != "per_outer"}
        out["config_hash"] = config_hash
        return out


def sim_grid(T, t, control, step=None):
    """Uniform grid on ``[t, T]``; the step defaults to the control's own grid."""
    if step is None:
        base = control.base if isinstance(control, SpikedControl) else control
        step = base.grid.step if hasattr(base, "grid") else (T - t) / 1000
    n = max(1, int(round((T - t) / step)))
    return TimeGrid(float(t), float(T), n)


def running_cost(problem, ens):
    """Per-path ``int (X'QX + u'Ru) ds``: trapezoid for the state term and a
    left-point rule for the control term, which is constant on each cell."""
    g = ens.grid
    h = g.step
    X, U = ens.X, ens.u
    Q = np.stack([problem.Q(float(s)) for s in g.knots])
    R = np.stack([problem.R(float(s)) for s in g.knots[:-1]])
    qx = np.einsum("pki,kij,pkj->pk", X, Q, X)
    ru = np.einsum("pki,kij,pkj->pk", U[:, :-1], R, U[:, :-1])
    return h * (0.5 * (qx[:, 0] + qx[:, -1]) + qx[:, 1:-1].sum(1)) + h * ru.sum(1)


def _blocks(values, n_outer, n_inner):
    return values.reshape((n_outer, n_inner) + values.shape[1:])


def lq_block_values(problem, x_outer, run, XT):
    """Unbiased per-outer-block objective values.

    ``run`` has shape (n_outer, n_inner) and ``XT`` (n_outer, n_inner, n).
    """
    n_inner = XT.shape[1]
    half = n_inner // 2
    G, hmat = problem.G, problem.h
    quad = 0.5 * run + 0.5 * np.einsum("opi,ij,opj->op", XT, G, XT)
    ma = XT[:, :half].mean(1)
    mb = XT[:, half:2 * half].mean(1)
    mean = XT.mean(1)
    lin = np.einsum("oi,oi->o", x_outer @ problem.mu1.T + problem.mu2, mean)
    return quad.mean(1) - 0.5 * np.einsum("oi,ij,oj->o", ma, hmat, mb) - lin


def eval_J(problem, t, x, control, config=None, mode="auto", streams=None):
    """Estimate the objective at ``(t, x)`` under ``control``.

    Parameters
    ----------
    problem : LQProblem
    t : float
    x : array_like
        Initial state (n,), or one state per outer sample (n_outer, n).
    control : FeedbackLaw, OpenLoopControl or SpikedControl
    config : MCConfig, optional
    mode : {"auto", "monte-carlo", "noise-free-quadrature"}
        ``auto`` picks quadrature for noise-free problems.
    streams : array_like, optional
        One RNG stream per outer state; inner paths then use path ids
        ``0 .. n_inner-1`` within their stream.

    Returns
    -------
    JEstimate
    """
    config = config or MCConfig()
    if mode == "auto":
        mode = "noise-free-quadrature" if problem.noise_free else "monte-carlo"
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    x = np.asarray(x, float)
    if t < 0 or t > problem.T:
        raise DomainError(f"t = {t} outside [0, {problem.T}]")
    if mode == "noise-free-quadrature":
        return _quadrature_J(problem, t, x, control, config)
    config.check()
    grid = sim_grid(problem.T, t, control, config.grid_step)
    n = problem.n
    if x.ndim == 2:
        n_outer = x.shape[0]
        x_outer = x
    else:
        n_outer = config.n_outer
        x_outer = np.broadcast_to(x.reshape(1, n), (n_outer, n))
    n_inner = config.n_inner
    xs = np.repeat(x_outer, n_inner, axis=0)
    if streams is not None:
        st = np.repeat(np.asarray(streams, np.uint64), n_inner)
        ids = np.tile(np.arange(n_inner, dtype=np.uint64), n_outer)
    else:
        st, ids = 0, None
    ens = euler_maruyama(problem, control, (t, xs), grid, config.seed, xs.shape[0],
                         streams=st, path_ids=ids, workers=config.workers)
    run = _blocks(running_cost(problem, ens), n_outer, n_inner)
    XT = _blocks(ens.X[:, -1], n_outer, n_inner)
    vals = lq_block_values(problem, x_outer, run, XT)
    se = float(vals.std(ddof=1) / np.sqrt(n_outer)) if n_outer > 1 else 0.0
    return JEstimate(float(vals.mean()), se, n_outer, n_inner, "monte-carlo", config.seed, vals)


def _quadrature_J(problem, t, x, control, config):
    """Deterministic objective: RK4 on the state augmented with its running
    cost (Simpson's rule for the cost integral)."""
    if not problem.noise_free:
        raise ConfigError("noise-free quadrature needs C = D = sigma = 0")
    grid = sim_grid(problem.T, t, control, config.grid_step)
    n, l = problem.n, problem.l
    x_rows = x.reshape(-1, n)
    m = x_rows.shape[0]
    spiked = isinstance(control, SpikedControl)
    base = control.base if spiked else control
    if spiked:
        control.spike.check_window(grid.t0, grid.t1)
        t_lo, t_hi = control.spike.t, control.spike.t + control.spike.eps
        v = control.spike.v
    if isinstance(base, FeedbackLaw):
        def u_of(s, xb):
            return xb @ base.alpha_at(s).T + base.beta_at(s)
    elif isinstance(base, OpenLoopControl):
        vals = np.asarray(base.values, float)
        if vals.ndim != 2:
            raise ConfigError("quadrature mode needs a deterministic open-loop control")

        def u_of(s, xb):
            return np.broadcast_to(vals[base.grid.cell_of(s)], (xb.shape[0], l))
    else:
        raise ConfigError(f"unsupported control type {type(base).__name__}")

    def field(s, y):
        c = problem.at(s)
        A, B, b, Q, R = c["A"], c["B"], c["b"], c["Q"], c["R"]
        X = y[:, :n]
        u = u_of(s, X)
        out = [X @ A.T + u @ B + b]
        if spiked:
            Xp = y[:, n:2 * n]
            up = u + (v if t_lo <= s < t_hi else 0.0)
            out.append(Xp @ A.T + up @ B + b)
            X, u = Xp, up
        cost = np.einsum("pi,ij,pj->p", X, Q, X) + np.einsum("pi,ij,pj->p", u, R, u)
        out.append(cost[:, None])
        return np.concatenate(out, axis=1)

    y0 = np.concatenate([x_rows, x_rows, np.zeros((m, 1))] if spiked else [x_rows, np.zeros((m, 1))], axis=1)
    yT = rk4_integrate(field, (grid.t0, y0), grid, direction="forward").values[-1]
    XT = yT[:, n:2 * n] if spiked else yT[:, :n]
    run = yT[:, -1]
    G, hm = problem.G, problem.h
    vals = (0.5 * run + 0.5 * np.einsum("pi,ij,pj->p", XT, G - hm, XT)
            - np.einsum("pi,pi->p", x_rows @ problem.mu1.T + problem.mu2, XT))
    return JEstimate(float(vals.mean()), 0.0, m, 1, "noise-free-quadrature", None, vals)


def eval_mv_J(market, t, x, control, config=None):
    """``1/2 Var_t(X_T) - (mu1 x + mu2) E_t[X_T]`` by nested Monte Carlo on the
    wealth equation, with the unbiased within-block sample variance."""
    config = config or MCConfig()
    config.check()
    x = np.asarray(x, float)
    grid = sim_grid(market.T, t, control, config.grid_step)
    if x.ndim >= 1 and x.size > 1:
        x_outer = x.reshape(-1)
    else:
        x_outer = np.full(config.n_outer, float(x))
    n_outer, n_inner = x_outer.size, config.n_inner
    ens = simulate_wealth(market, control, (t, np.repeat(x_outer, n_inner)), grid, config.seed,
                          n_outer * n_inner)
    XT = ens.X[:, -1, 0].reshape(n_outer, n_inner)
    vals = 0.5 * XT.var(axis=1, ddof=1) - (market.mu1 * x_outer + market.mu2) * XT.mean(1)
    se = float(vals.std(ddof=1) / np.sqrt(n_outer))
    return JEstimate(float(vals.mean()), se, n_outer, n_inner, "monte-carlo", config.seed, vals)
