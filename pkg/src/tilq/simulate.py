"""Seeded Euler-Maruyama simulation of the controlled state and of wealth.

Noise comes from :mod:`tilq.rng`: the increment of path ``i`` on cell ``k`` is a
pure function of ``(seed, stream, i, k)``. All arithmetic is row-wise
broadcasting (no BLAS calls), so an ensemble is bitwise identical however its
paths are split across workers.
"""

from __future__ import annotations

import csv
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .detsolve import Trajectory, rk4_integrate
from .errors import ConfigError, DimensionError, DomainError, SimulationError
from .feedback import FeedbackLaw
from .model import SpikePerturbation, TimeGrid
from .rng import normals, restart_stream

DUMP_MAGIC = b"TILQPATH"
DUMP_VERSION = 1


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Sample paths on a shared grid.

    ``X`` has shape (npaths, K+1, n), ``u`` (npaths, K+1, l) and ``dW``
    (npaths, K, d). ``streams`` and ``path_ids`` record the RNG counters used.
    """

    grid: TimeGrid
    seed: int
    X: np.ndarray
    u: np.ndarray
    dW: np.ndarray
    streams: np.ndarray
    path_ids: np.ndarray

    @property
    def npaths(self):
        return self.X.shape[0]

    def write_binary(self, path):
        """Little-endian dump: magic, version, dims, grid, seed, then X, u, dW."""
        m, K1, n = self.X.shape
        l, d = self.u.shape[2], self.dW.shape[2]
        with open(path, "wb") as fh:
            fh.write(DUMP_MAGIC)
            fh.write(struct.pack("<I5Q2dQ", DUMP_VERSION, m, K1, n, l, d,
                                 self.grid.t0, self.grid.t1, int(self.seed)))
            for arr in (self.X, self.u, self.dW):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def read_binary(cls, path):
        with open(path, "rb") as fh:
            if fh.read(8) != DUMP_MAGIC:
                raise ConfigError(f"{path} is not a path dump")
            head = struct.Struct("<I5Q2dQ")
            ver, m, K1, n, l, d, t0, t1, seed = head.unpack(fh.read(head.size))
            if ver != DUMP_VERSION:
                raise ConfigError(f"unsupported dump version {ver}")
            X = np.frombuffer(fh.read(8 * m * K1 * n), "<f8").reshape(m, K1, n)
            u = np.frombuffer(fh.read(8 * m * K1 * l), "<f8").reshape(m, K1, l)
            dW = np.frombuffer(fh.read(8 * m * (K1 - 1) * d), "<f8").reshape(m, K1 - 1, d)
        return cls(TimeGrid(t0, t1, K1 - 1), seed, X, u, dW,
                   np.zeros(m, np.uint64), np.arange(m, dtype=np.uint64))

    def write_csv(self, path):
        m, K1, n = self.X.shape
        l, d = self.u.shape[2], self.dW.shape[2]
        header = (["path", "k", "t"] + [f"X_{i}" for i in range(n)]
                  + [f"u_{i}" for i in range(l)] + [f"dW_{j}" for j in range(d)])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for p in range(m):
                for k, t in enumerate(self.grid.knots):
                    dw = [repr(float(v)) for v in self.dW[p, k]] if k < K1 - 1 else [""] * d
                    w.writerow([p, k, repr(float(t))] + [repr(float(v)) for v in self.X[p, k]]
                               + [repr(float(v)) for v in self.u[p, k]] + dw)


@dataclass(frozen=True, eq=False)
class OpenLoopControl:
    """Pre-computed control values, shape (npaths, K+1, l) or (K+1, l)."""

    grid: TimeGrid
    values: np.ndarray


@dataclass(frozen=True, eq=False)
class SpikedControl:
    """``base + v`` on the spike window. When ``base`` is a feedback law the
    base state is simulated alongside, so the spiked control is the realised
    base control process plus the spike (open loop with respect to the
    perturbed state)."""

    base: object
    spike: SpikePerturbation


def apply_spike(base, spike):
    """Spike-perturbed version of ``base`` on ``[t, t + eps)``."""
    grid = base.grid
    spike.check_window(grid.t0, grid.t1)
    return SpikedControl(base, spike)


def _window_mask(grid, spike):
    """Cells of ``grid`` whose left knot lies in ``[t, t + eps)``."""
    tol = 1e-9 * grid.step
    k = grid.knots[:-1]
    return (k >= spike.t - tol) & (k < spike.t + spike.eps - tol)


def law_samples(law, knots):
    """``alpha``, ``beta`` at the given times; exact at the law's own knots."""
    g = law.grid
    if len(knots) == len(g) and np.allclose(knots, g.knots, rtol=0, atol=1e-12 * g.step):
        return law.alpha, law.beta
    if len(knots) <= len(g):
        idx = np.rint((np.asarray(knots) - g.t0) / g.step).astype(int)
        if np.all((idx >= 0) & (idx <= g.n_steps)) and np.allclose(
                g.t0 + idx * g.step, knots, rtol=0, atol=1e-9 * g.step):
            return law.alpha[idx], law.beta[idx]
    return (np.stack([law.alpha_at(s) for s in knots]), np.stack([law.beta_at(s) for s in knots]))


def _coeff_table(problem, knots):
    return {k: np.stack([cf(float(s)) for s in knots]) for k, cf in problem.coefficients().items()}


def _matvec(M, x):
    # row-wise M @ x without BLAS
    return (M * x[..., None, :]).sum(-1)


def workers_cap(requested=None):
    cap = os.environ.get("TILQ_THREADS")
    n = requested or os.cpu_count() or 1
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


def _em_chunk(problem, tab, grid, control_kind, ctrl, x0, seed, streams, path_ids):
    m = path_ids.shape[0]
    K = grid.n_steps
    n, l, d = problem.n, problem.l, problem.d
    h = grid.step
    sqh = np.sqrt(h)
    X = np.empty((m, K + 1, n))
    U = np.empty((m, K + 1, l))
    dW = np.empty((m, K, d))
    X[:, 0] = x0
    base = X[:, 0].copy() if control_kind == "spiked-law" else None
    for k in range(K + 1):
        x = X[:, k]
        if control_kind == "law":
            u = _matvec(ctrl["alpha"][k], x) + ctrl["beta"][k]
        elif control_kind == "open":
            u = ctrl["values"][:, k] if ctrl["values"].ndim == 3 else np.broadcast_to(ctrl["values"][k], (m, l))
        elif control_kind == "spiked-law":
            u = _matvec(ctrl["alpha"][k], base) + ctrl["beta"][k]
        else:
            raise ConfigError(f"unknown control kind {control_kind}")
        if control_kind != "law" and k < K and ctrl["window"][k]:
            u = u + ctrl["v"]
        U[:, k] = u
        if k == K:
            break
        z = normals(seed, streams, path_ids, k, d) * sqh
        dW[:, k] = z
        A, B, b = tab["A"][k], tab["B"][k], tab["b"][k]
        C, D, sig = tab["C"][k], tab["D"][k], tab["sigma"][k]
        drift = _matvec(A, x) + _matvec(B.T, u) + b
        diff = np.zeros_like(x)
        for j in range(d):
            diff = diff + (_matvec(C[j], x) + _matvec(D[j], u) + sig[j]) * z[:, j:j + 1]
        X[:, k + 1] = x + drift * h + diff
        if control_kind == "spiked-law":
            ub = _matvec(ctrl["alpha"][k], base) + ctrl["beta"][k]
            db = _matvec(A, base) + _matvec(B.T, ub) + b
            ddb = np.zeros_like(base)
            for j in range(d):
                ddb = ddb + (_matvec(C[j], base) + _matvec(D[j], ub) + sig[j]) * z[:, j:j + 1]
            base = base + db * h + ddb
        if not np.all(np.isfinite(X[:, k + 1])):
            bad = int(np.argmax(~np.all(np.isfinite(X[:, k + 1]), axis=1)))
            raise SimulationError(f"non-finite state on path {int(path_ids[bad])} at knot {k + 1}",
                                  path=int(path_ids[bad]), knot=k + 1)
    return X, U, dW


def _control_spec(control, grid, npaths):
    if isinstance(control, FeedbackLaw):
        a, b = law_samples(control, grid.knots)
        return "law", {"alpha": a, "beta": b}
    if isinstance(control, OpenLoopControl):
        vals = np.asarray(control.values, float)
        if vals.shape[-2] != len(grid):
            raise DimensionError("open-loop control does not match the simulation grid")
        if vals.ndim == 3 and vals.shape[0] != npaths:
            raise DimensionError("open-loop control has the wrong number of paths")
        return "open", {"values": vals, "window": np.zeros(grid.n_steps, bool), "v": 0.0}
    if isinstance(control, SpikedControl):
        control.spike.check_window(grid.t0, grid.t1)
        kind, spec = _control_spec(control.base, grid, npaths)
        spec = dict(spec, window=_window_mask(grid, control.spike), v=control.spike.v)
        return ("spiked-law" if kind == "law" else "open"), spec
    raise ConfigError(f"unsupported control type {type(control).__name__}")


def euler_maruyama(problem, control, start, grid, seed, npaths, *, streams=0, path_ids=None,
                   workers=None):
    """Simulate ``npaths`` Euler-Maruyama paths from ``start = (t, x)``.

    Parameters
    ----------
    problem : LQProblem
    control : FeedbackLaw, OpenLoopControl or SpikedControl
    start : tuple
        ``(t, x)`` with ``x`` of shape (n,) or one state per path (npaths, n).
    grid : TimeGrid
        Must start at ``t`` and end at the horizon.
    seed : int
    npaths : int
    streams : int or array_like
        RNG stream id(s); per-path arrays are allowed.
    path_ids : array_like, optional
        RNG path indices, default ``0 .. npaths-1``.
    workers : int, optional
        Thread count, capped by ``TILQ_THREADS``. Results do not depend on it.

    Returns
    -------
    PathEnsemble
    """
    t, x = start
    if abs(grid.t0 - t) > 1e-12 * max(1.0, problem.T) or abs(grid.t1 - problem.T) > 1e-12 * max(1.0, problem.T):
        raise DomainError(f"simulation grid must span [{t}, {problem.T}]")
    if npaths < 1:
        raise ConfigError("npaths must be at least 1")
    x = np.asarray(x, float)
    x0 = np.broadcast_to(x.reshape(-1, problem.n) if x.ndim > 1 else x.reshape(1, problem.n),
                         (npaths, problem.n))
    ids = np.arange(npaths, dtype=np.uint64) if path_ids is None else np.asarray(path_ids, np.uint64)
    st = np.ascontiguousarray(np.broadcast_to(np.asarray(streams, np.uint64), (npaths,)))
    kind, spec = _control_spec(control, grid, npaths)
    tab = _coeff_table(problem, grid.knots)

    nw = min(workers_cap(workers), max(1, npaths // 256))
    bounds = np.linspace(0, npaths, nw + 1).astype(int)

    def run(i):
        sl = slice(bounds[i], bounds[i + 1])
        sp = dict(spec)
        if kind == "open" and spec["values"].ndim == 3:
            sp["values"] = spec["values"][sl]
        return _em_chunk(problem, tab, grid, kind, sp, x0[sl], seed, st[sl], ids[sl])

    if nw == 1:
        parts = [run(0)]
    else:
        with ThreadPoolExecutor(nw) as ex:
            parts = list(ex.map(run, range(nw)))
    X, U, dW = (np.concatenate([p[i] for p in parts]) for i in range(3))
    return PathEnsemble(grid, seed, X, U, dW, st, ids)


def simulate_wealth(market, control, start, grid, seed, npaths, *, streams=0, path_ids=None):
    """Euler-Maruyama for ``dX = (r X + theta'u) ds + u'dW``; same noise
    counters as :func:`euler_maruyama` for the embedded problem."""
    t, x = start
    if abs(grid.t0 - t) > 1e-12 or abs(grid.t1 - market.T) > 1e-12 * max(1.0, market.T):
        raise DomainError(f"simulation grid must span [{t}, {market.T}]")
    d = market.d
    K, h = grid.n_steps, grid.step
    ids = np.arange(npaths, dtype=np.uint64) if path_ids is None else np.asarray(path_ids, np.uint64)
    st = np.ascontiguousarray(np.broadcast_to(np.asarray(streams, np.uint64), (npaths,)))
    if isinstance(control, FeedbackLaw):
        a, b = law_samples(control, grid.knots)
        a = a[:, :, 0]
    elif isinstance(control, OpenLoopControl):
        a, b = np.zeros((K + 1, d)), np.broadcast_to(control.values, (K + 1, d))
    else:
        raise ConfigError(f"unsupported control type {type(control).__name__}")
    X = np.empty((npaths, K + 1))
    U = np.empty((npaths, K + 1, d))
    dW = np.empty((npaths, K, d))
    X[:, 0] = np.asarray(x, float).reshape(-1) if np.ndim(x) else float(x)
    for k in range(K + 1):
        u = X[:, k, None] * a[k] + b[k]
        U[:, k] = u
        if k == K:
            break
        z = normals(seed, st, ids, k, d) * np.sqrt(h)
        dW[:, k] = z
        r, th = market.r(float(grid.knots[k])), market.theta(float(grid.knots[k]))
        X[:, k + 1] = X[:, k] + (r * X[:, k] + (u * th).sum(1)) * h + (u * z).sum(1)
    return PathEnsemble(grid, seed, X[:, :, None], U, dW, st, ids)


@dataclass(frozen=True)
class RestartPoint:
    x: np.ndarray
    seed: int
    stream: int
    outer_index: int


def conditional_restart(ensemble, t):
    """One restart point per outer path at knot ``t``, with its own stream."""
    g = ensemble.grid
    j = g.index_of(t)
    streams = restart_stream(j, np.arange(ensemble.npaths))
    return [RestartPoint(ensemble.X[i, j].copy(), int(ensemble.seed), int(streams[i]), i)
            for i in range(ensemble.npaths)]


def restart_ensemble(problem, control, ensemble, t, n_inner, *, workers=None):
    """Inner paths from every outer state at ``t``; rows are ordered outer-major."""
    pts = conditional_restart(ensemble, t)
    g = ensemble.grid
    j = g.index_of(t)
    sub = TimeGrid(float(g.knots[j]), g.t1, g.n_steps - j)
    x = np.repeat(np.stack([p.x for p in pts]), n_inner, axis=0)
    streams = np.repeat(np.array([p.stream for p in pts], np.uint64), n_inner)
    ids = np.tile(np.arange(n_inner, dtype=np.uint64), len(pts))
    return euler_maruyama(problem, control, (sub.t0, x), sub, ensemble.seed, x.shape[0],
                          streams=streams, path_ids=ids, workers=workers)


class MeanFlow:
    """Conditional-mean propagator of the closed loop ``dX = [(A + B'alpha)X + B'beta + b] ds + ...``.

    ``E_t[X_s] = Phi1(t, s) X_t + Phi2(t, s)`` with ``Phi1 = F(s) F(t)^-1`` and
    ``Phi2 = Psi(s) - Phi1 Psi(t)``, where ``F`` and ``Psi`` are integrated once
    forward from the law's grid start.
    """

    def __init__(self, problem, law):
        self.problem, self.law = problem, law
        n = problem.n
        g = law.grid

        def field(s, y):
            A, B, b = problem.A(s), problem.B(s), problem.b(s)
            a, be = law.alpha_at(s), law.beta_at(s)
            cl = A + B.T @ a
            F, Psi = y[:, :n], y[:, n]
            return np.concatenate([cl @ F, (cl @ Psi + B.T @ be + b)[:, None]], axis=1)

        y0 = np.concatenate([np.eye(n), np.zeros((n, 1))], axis=1)
        self.flow = rk4_integrate(field, (g.t0, y0), g, direction="forward")
        self.grid = g

    def _at(self, s):
        k = self._knot(s)
        y = self.flow.values[k] if k is not None else self.flow(s)
        n = self.problem.n
        return y[:, :n], y[:, n]

    def _knot(self, s):
        g = self.grid
        k = int(round((s - g.t0) / g.step))
        if 0 <= k <= g.n_steps and abs(g.knots[k] - s) <= 1e-9 * g.step:
            return k
        return None

    def propagate(self, t, s):
        if s < t - 1e-12:
            raise DomainError(f"mean propagator needs t <= s (got t={t}, s={s})")
        Ft, Pt = self._at(t)
        Fs, Ps = self._at(s)
        phi1 = np.linalg.solve(Ft.T, Fs.T).T
        return phi1, Ps - phi1 @ Pt

    def knot_arrays(self):
        """``F`` and ``Psi`` at every knot (scalar state), for vectorised use."""
        return self.flow.values[:, 0, 0], self.flow.values[:, 0, 1]


def mean_propagator(problem, law, t, s):
    """``(Phi1, Phi2)`` with ``E_t[X_s] = Phi1 X_t + Phi2`` under ``law``."""
    return MeanFlow(problem, law).propagate(t, s)
