"""Affine feedback laws ``u(s, x) = alpha_s x + beta_s`` built from solved systems."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .detsolve import _scalar_coeffs, gain_matrix, solve_gain
from .errors import ConfigError, DimensionError, DomainError
from .model import TimeGrid


def _ro(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FeedbackLaw:
    """Sampled gain ``alpha`` (l, n) and offset ``beta`` (l,).

    Each cell carries three samples: the knot value at its start, the value at
    its midpoint and the left limit at its end (which differs from the next
    knot value only where a coefficient jumps on that knot). Off-knot values
    come from the quadratic through those three samples.
    """

    grid: TimeGrid
    alpha: np.ndarray
    beta: np.ndarray
    alpha_mid: np.ndarray
    beta_mid: np.ndarray
    alpha_end: np.ndarray
    beta_end: np.ndarray

    def __post_init__(self):
        K = self.grid.n_steps
        for key in ("alpha", "beta", "alpha_mid", "beta_mid", "alpha_end", "beta_end"):
            arr = _ro(getattr(self, key))
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"feedback law has non-finite {key}")
            object.__setattr__(self, key, arr)
        if self.alpha.ndim != 3 or self.alpha.shape[0] != K + 1:
            raise DimensionError(f"alpha must have shape ({K + 1}, l, n), got {self.alpha.shape}")
        l, n = self.alpha.shape[1:]
        want = {"beta": (K + 1, l), "alpha_mid": (K, l, n), "beta_mid": (K, l),
                "alpha_end": (K, l, n), "beta_end": (K, l)}
        for key, shape in want.items():
            if getattr(self, key).shape != shape:
                raise DimensionError(f"{key} must have shape {shape}, got {getattr(self, key).shape}")

    @property
    def l(self):
        return self.alpha.shape[1]

    @property
    def n(self):
        return self.alpha.shape[2]

    @classmethod
    def from_knots(cls, grid, alpha, beta):
        """Law from knot samples only (continuous, linear within cells)."""
        alpha, beta = np.asarray(alpha, float), np.asarray(beta, float)
        return cls(grid, alpha, beta, 0.5 * (alpha[:-1] + alpha[1:]), 0.5 * (beta[:-1] + beta[1:]),
                   alpha[1:], beta[1:])

    @classmethod
    def zero(cls, grid, l, n=1):
        K = grid.n_steps
        return cls.from_knots(grid, np.zeros((K + 1, l, n)), np.zeros((K + 1, l)))

    def _weights(self, s):
        g = self.grid
        s = float(s)
        if s < g.t0 - 1e-12 * g.step or s > g.t1 + 1e-12 * g.step:
            raise DomainError(f"s = {s} outside [{g.t0}, {g.t1}]")
        c = g.cell_of(s)
        th = (s - g.knots[c]) / g.step
        return c, 2 * (th - 0.5) * (th - 1), -4 * th * (th - 1), 2 * th * (th - 0.5)

    def alpha_at(self, s):
        c, w0, w1, w2 = self._weights(s)
        return w0 * self.alpha[c] + w1 * self.alpha_mid[c] + w2 * self.alpha_end[c]

    def beta_at(self, s):
        c, w0, w1, w2 = self._weights(s)
        return w0 * self.beta[c] + w1 * self.beta_mid[c] + w2 * self.beta_end[c]

    def eval(self, s, x):
        """Control at time ``s`` for state(s) ``x`` of shape (n,) or (m, n)."""
        x = np.asarray(x, dtype=float)
        a, b = self.alpha_at(s), self.beta_at(s)
        return x @ a.T + b

    __call__ = eval

    def perturbed(self, delta, window=None, target="alpha"):
        """Copy with ``delta`` added to ``alpha`` (or ``beta``) on ``window``.

        The window ``[t0, t1)`` defaults to the first half of the horizon and is
        snapped to grid knots.
        """
        g = self.grid
        t0, t1 = window if window is not None else (g.t0, 0.5 * (g.t0 + g.t1))
        k0 = int(round((t0 - g.t0) / g.step))
        k1 = int(round((t1 - g.t0) / g.step))
        if not 0 <= k0 < k1 <= g.n_steps:
            raise DomainError(f"perturbation window [{t0}, {t1}) not inside the grid")
        if target not in ("alpha", "beta"):
            raise ValueError("target must be 'alpha' or 'beta'")
        parts = {k: np.array(getattr(self, k)) for k in
                 ("alpha", "beta", "alpha_mid", "beta_mid", "alpha_end", "beta_end")}
        parts[target][k0:k1] += delta
        parts[target + "_mid"][k0:k1] += delta
        parts[target + "_end"][k0:k1] += delta
        return FeedbackLaw(g, **parts)

    def to_dict(self):
        g = self.grid
        return {"grid": {"t0": g.t0, "t1": g.t1, "n_steps": g.n_steps},
                **{k: getattr(self, k).tolist() for k in
                   ("alpha", "beta", "alpha_mid", "beta_mid", "alpha_end", "beta_end")}}

    @classmethod
    def from_dict(cls, data):
        try:
            grid = TimeGrid(**data["grid"])
            return cls(grid, *(np.asarray(data[k], float) for k in
                               ("alpha", "beta", "alpha_mid", "beta_mid", "alpha_end", "beta_end")))
        except KeyError as exc:
            raise ConfigError(f"feedback law is missing field {exc.args[0]!r}") from None

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_csv(self, path):
        l, n = self.l, self.n
        header = ["t"] + [f"alpha_{i}_{j}" if n > 1 else f"alpha_{i}" for i in range(l) for j in range(n)]
        header += [f"beta_{i}" for i in range(l)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k, t in enumerate(self.grid.knots):
                w.writerow([repr(float(v)) for v in
                            [t, *self.alpha[k].ravel(), *self.beta[k]]])


def _lq_gains(problem, s, M, N, G1, Phi):
    A, B, b, C, D, sig, _, R = _scalar_coeffs(problem, s)
    S = gain_matrix(R, M, D)
    alpha = -solve_gain(S, (M - N - G1) * B + M * (D.T @ C), R, M, B, D, s)
    beta = -solve_gain(S, Phi * B + M * (D.T @ sig), R, M, B, D, s)
    return alpha[:, None], beta


def build_lq_feedback(problem, sys):
    """Equilibrium feedback from a solved :class:`EquilibriumSystem`.

    ``alpha = -S^-1 [(M - N - Gamma1) B + M D'C]`` and
    ``beta = -S^-1 (Phi B + M D' sigma)`` with ``S = R + M D'D``.
    """
    g = sys.grid
    K = g.n_steps
    traj = (sys.M, sys.N, sys.Gamma1, sys.Phi)
    l = problem.l
    a, b = np.empty((K + 1, l, 1)), np.empty((K + 1, l))
    am, bm = np.empty((K, l, 1)), np.empty((K, l))
    ae, be = np.empty((K, l, 1)), np.empty((K, l))
    for k, s in enumerate(g.knots):
        a[k], b[k] = _lq_gains(problem, s, *(tr[k] for tr in traj))
    for c in range(K):
        am[c], bm[c] = _lq_gains(problem, g.midpoints[c], *(tr.mid[c] for tr in traj))
        s_end = np.nextafter(g.knots[c + 1], g.knots[c])
        ae[c], be[c] = _lq_gains(problem, s_end, *(tr[c + 1] for tr in traj))
    return FeedbackLaw(g, a, b, am, bm, ae, be)


def build_mv_feedback(market, sys):
    """Mean-variance equilibrium ``alpha = theta Gamma1 / M``,
    ``beta = -theta (Gamma2 - Gamma3) / M``, returned as (d, 1) and (d,)."""
    g = sys.grid
    K = g.n_steps

    def gains(s, M, G1, G2, G3):
        th = market.theta(s)
        return (th * G1 / M)[:, None], -th * (G2 - G3) / M

    traj = (sys.M, sys.Gamma1, sys.Gamma2, sys.Gamma3)
    d = market.d
    a, b = np.empty((K + 1, d, 1)), np.empty((K + 1, d))
    am, bm = np.empty((K, d, 1)), np.empty((K, d))
    ae, be = np.empty((K, d, 1)), np.empty((K, d))
    for k, s in enumerate(g.knots):
        a[k], b[k] = gains(s, *(tr[k] for tr in traj))
    for c in range(K):
        am[c], bm[c] = gains(g.midpoints[c], *(tr.mid[c] for tr in traj))
        ae[c], be[c] = gains(np.nextafter(g.knots[c + 1], g.knots[c]), *(tr[c + 1] for tr in traj))
    return FeedbackLaw(g, a, b, am, bm, ae, be)
