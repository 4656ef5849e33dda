"""Problem definitions: coefficient functions, LQ problems, markets, grids.

All model objects are immutable once built; their arrays are flagged read-only.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ConfigError, DimensionError, DomainError

KINDS = ("constant", "piecewise-constant", "sampled-on-grid")


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CoefficientFunction:
    """Deterministic function of time, constant between knots.

    ``values[i]`` holds on ``[knots[i], knots[i+1])``; the first value is used
    before the first knot and the last one from the last knot onwards.
    """

    kind: str
    knots: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown coefficient kind {self.kind!r}")
        knots = _frozen(np.atleast_1d(self.knots))
        values = _frozen(self.values)
        if knots.ndim != 1 or values.shape[:1] != knots.shape:
            raise DimensionError(
                f"coefficient has {knots.size} knots but values of shape {values.shape}")
        if knots.size > 1 and np.any(np.diff(knots) <= 0):
            raise ConfigError("coefficient knots must be strictly increasing")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "_knot_list", knots.tolist())

    @classmethod
    def constant(cls, value):
        value = np.asarray(value, dtype=float)
        return cls("constant", np.zeros(1), value[None])

    @classmethod
    def piecewise(cls, knots, values):
        return cls("piecewise-constant", np.asarray(knots, float), np.asarray(values, float))

    @classmethod
    def sampled(cls, grid, values):
        return cls("sampled-on-grid", grid.knots, np.asarray(values, float))

    @property
    def shape(self):
        return self.values.shape[1:]

    @property
    def max_norm(self):
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0

    def reshape(self, shape):
        return type(self)(self.kind, self.knots, self.values.reshape((-1,) + tuple(shape)))

    def __call__(self, s):
        if self.knots.size == 1:
            return self.values[0]
        if isinstance(s, float):
            return self.values[max(bisect_right(self._knot_list, s) - 1, 0)]
        s = np.asarray(s, dtype=float)
        idx = np.clip(np.searchsorted(self.knots, s, side="right") - 1, 0, self.knots.size - 1)
        return self.values[idx]

    def __repr__(self):
        return f"CoefficientFunction({self.kind!r}, shape={self.shape}, knots={self.knots.size})"


def as_coefficient(value, shape):
    """Coerce scalars, arrays, mappings or coefficient functions to ``shape``."""
    shape = tuple(shape)
    size = int(np.prod(shape)) if shape else 1
    if isinstance(value, dict):
        value = coefficient_from_dict(value)
    if isinstance(value, CoefficientFunction):
        if value.shape == shape:
            return value
        if int(np.prod(value.shape)) == size:
            return value.reshape(shape)
        raise DimensionError(f"coefficient of shape {value.shape} does not fit {shape}")
    arr = np.asarray(value, dtype=float)
    if arr.size == size:
        return CoefficientFunction.constant(arr.reshape(shape))
    if arr.ndim == 0:
        return CoefficientFunction.constant(np.full(shape, float(arr)))
    raise DimensionError(f"value of shape {arr.shape} does not fit {shape}")


def coefficient_from_dict(spec):
    kind = spec.get("kind", "constant")
    if kind == "constant":
        return CoefficientFunction.constant(spec["values"] if "values" in spec else spec["value"])
    return CoefficientFunction(kind, np.asarray(spec["knots"], float), np.asarray(spec["values"], float))


def coefficient_to_dict(cf):
    if cf.kind == "constant":
        return {"kind": "constant", "values": cf.values[0].tolist()}
    return {"kind": cf.kind, "knots": cf.knots.tolist(), "values": cf.values.tolist()}


def _const_array(value, shape):
    arr = np.asarray(value, dtype=float)
    if arr.size == int(np.prod(shape)):
        return _frozen(arr.reshape(shape))
    if arr.ndim == 0:
        return _frozen(np.full(shape, float(arr)))
    raise DimensionError(f"value of shape {arr.shape} does not fit {shape}")


@dataclass(frozen=True, eq=False)
class LQProblem:
    """Controlled linear SDE plus the time-inconsistent quadratic objective.

    State dynamics::

        dX = [A X + B' u + b] ds + sum_j [C^j X + D^j u + sigma^j] dW^j

    Shapes (per time): ``A`` (n, n), ``B`` (l, n), ``b`` (n,), ``C`` (d, n, n),
    ``D`` (d, n, l), ``sigma`` (d, n), ``Q`` (n, n), ``R`` (l, l). The objective
    weights ``G``, ``h``, ``mu1`` are constant (n, n) matrices and ``mu2`` an
    n-vector.
    """

    T: float
    x0: np.ndarray
    A: CoefficientFunction
    B: CoefficientFunction
    b: CoefficientFunction
    C: CoefficientFunction
    D: CoefficientFunction
    sigma: CoefficientFunction
    Q: CoefficientFunction
    R: CoefficientFunction
    G: np.ndarray
    h: np.ndarray
    mu1: np.ndarray
    mu2: np.ndarray
    name: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "x0", _frozen(np.atleast_1d(self.x0)))
        for key in ("G", "h", "mu1", "mu2"):
            object.__setattr__(self, key, _frozen(getattr(self, key)))

    @property
    def n(self):
        return self.x0.shape[0]

    @property
    def l(self):
        return self.R.shape[0]

    @property
    def d(self):
        return self.sigma.shape[0]

    def coefficients(self):
        return {k: getattr(self, k) for k in ("A", "B", "b", "C", "D", "sigma", "Q", "R")}

    def at(self, s):
        """All time-dependent coefficients evaluated at ``s``."""
        return {k: cf(s) for k, cf in self.coefficients().items()}

    @property
    def noise_free(self):
        return all(np.all(getattr(self, k).values == 0.0) for k in ("C", "D", "sigma"))

    def replace(self, **changes):
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(changes)
        return make_problem(**fields, d=self.d, l=self.l)


def make_problem(T, x0, A=0.0, B=0.0, b=0.0, C=0.0, D=0.0, sigma=0.0, Q=0.0, R=0.0,
                 G=0.0, h=0.0, mu1=0.0, mu2=0.0, *, d=1, l=1, name=""):
    """Build an :class:`LQProblem`, coercing scalars and flat arrays.

    The state dimension is taken from ``x0``. A scalar is broadcast to fill the
    whole target shape, so for ``n > 1`` pass matrices explicitly.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    n = x0.size
    if n < 1 or d < 1 or l < 1:
        raise DimensionError("n, d and l must all be at least 1")
    return LQProblem(
        T=T, x0=x0,
        A=as_coefficient(A, (n, n)),
        B=as_coefficient(B, (l, n)),
        b=as_coefficient(b, (n,)),
        C=as_coefficient(C, (d, n, n)),
        D=as_coefficient(D, (d, n, l)),
        sigma=as_coefficient(sigma, (d, n)),
        Q=as_coefficient(Q, (n, n)),
        R=as_coefficient(R, (l, l)),
        G=_const_array(G, (n, n)),
        h=_const_array(h, (n, n)),
        mu1=_const_array(mu1, (n, n)),
        mu2=_const_array(mu2, (n,)),
        name=name,
    )


def _psd_violation(mat, tol=1e-12):
    sym = 0.5 * (mat + np.swapaxes(mat, -1, -2))
    eig = np.linalg.eigvalsh(sym)
    scale = 1.0 + np.max(np.abs(sym)) if sym.size else 1.0
    return bool(np.any(eig < -tol * scale))


def _asym(mat, tol=1e-12):
    return bool(np.any(np.abs(mat - np.swapaxes(mat, -1, -2)) > tol * (1.0 + np.max(np.abs(mat)))))


def validate(problem, construct=False):
    """Check every type invariant of ``problem``.

    Parameters
    ----------
    problem : LQProblem
    construct : bool
        Also require the scalar-state setting needed by the equilibrium
        constructor.

    Returns
    -------
    list of str
        One message per violated invariant, each naming its field. Empty when
        the problem is valid.
    """
    out = []
    n = problem.n
    if not problem.T > 0:
        out.append(f"T must be positive (got {problem.T})")
    expected = {
        "A": (n, n), "B": (problem.l, n), "b": (n,), "C": (problem.d, n, n),
        "D": (problem.d, n, problem.l), "sigma": (problem.d, n), "Q": (n, n),
        "R": (problem.l, problem.l),
    }
    for key, shape in expected.items():
        cf = getattr(problem, key)
        if cf.shape != shape:
            out.append(f"{key} has shape {cf.shape}, expected {shape}")
        if not np.all(np.isfinite(cf.values)):
            out.append(f"{key} has non-finite values")
        if cf.knots[0] > 0.0:
            out.append(f"{key} is undefined on [0, {cf.knots[0]})")
    for key in ("x0", "G", "h", "mu1", "mu2"):
        if not np.all(np.isfinite(getattr(problem, key))):
            out.append(f"{key} has non-finite values")
    if problem.Q.shape == (n, n) and _psd_violation(problem.Q.values):
        out.append("Q not psd")
    if problem.R.shape == (problem.l, problem.l) and _psd_violation(problem.R.values):
        out.append("R not psd")
    if _asym(problem.Q.values):
        out.append("Q not symmetric")
    if _asym(problem.R.values):
        out.append("R not symmetric")
    if _psd_violation(problem.G):
        out.append("G not psd")
    if _asym(problem.G):
        out.append("G not symmetric")
    if _asym(problem.h):
        out.append("h not symmetric")
    if construct and n != 1:
        out.append("n must be 1 for equilibrium construction")
    return out


@dataclass(frozen=True, eq=False)
class MVMarket:
    """Wealth ``dX = [r X + theta' u] ds + u' dW`` with objective
    ``0.5 Var_t(X_T) - (mu1 x_t + mu2) E_t[X_T]``."""

    T: float
    x0: float
    r: CoefficientFunction
    theta: CoefficientFunction
    mu1: float
    mu2: float
    name: str = field(default="", compare=False)

    @property
    def d(self):
        return self.theta.shape[0]


def make_market(T, x0, r=0.0, theta=0.0, mu1=0.0, mu2=0.0, *, name=""):
    if isinstance(theta, dict):
        theta = coefficient_from_dict(theta)
    if isinstance(theta, CoefficientFunction):
        d = int(np.prod(theta.shape)) if theta.shape else 1
    else:
        d = np.asarray(theta).size
    return MVMarket(T=float(T), x0=float(x0), r=as_coefficient(r, ()),
                    theta=as_coefficient(theta, (d,)), mu1=float(mu1), mu2=float(mu2), name=name)


def validate_market(market):
    out = []
    if not market.T > 0:
        out.append(f"T must be positive (got {market.T})")
    if market.mu1 < 0:
        out.append(f"mu1 must be nonnegative (got {market.mu1})")
    if market.r.shape != ():
        out.append(f"r has shape {market.r.shape}, expected ()")
    if len(market.theta.shape) != 1:
        out.append(f"theta has shape {market.theta.shape}, expected (d,)")
    for key in ("r", "theta"):
        cf = getattr(market, key)
        if not np.all(np.isfinite(cf.values)):
            out.append(f"{key} has non-finite values")
        if cf.knots[0] > 0.0:
            out.append(f"{key} is undefined on [0, {cf.knots[0]})")
    for key in ("x0", "mu1", "mu2"):
        if not np.isfinite(getattr(market, key)):
            out.append(f"{key} is not finite")
    return out


def mv_as_lq(market):
    """Embed the mean-variance market in the general LQ problem (n = 1, l = d)."""
    d = market.d
    eye = np.eye(d).reshape(d, 1, d)
    return make_problem(
        T=market.T, x0=market.x0,
        A=market.r.reshape((1, 1)),
        B=market.theta.reshape((d, 1)),
        D=eye, G=1.0, h=1.0, mu1=market.mu1, mu2=market.mu2,
        d=d, l=d, name=market.name,
    )


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid with ``n_steps`` cells on ``[t0, t1]``."""

    t0: float
    t1: float
    n_steps: int

    def __post_init__(self):
        if not self.t1 > self.t0:
            raise ConfigError(f"grid needs t0 < t1 (got {self.t0}, {self.t1})")
        if int(self.n_steps) < 1:
            raise ConfigError("grid needs at least one step")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @classmethod
    def with_step(cls, t0, t1, step):
        n = int(round((t1 - t0) / step))
        if n < 1 or abs(n * step - (t1 - t0)) > 1e-9 * (t1 - t0):
            raise ConfigError(f"step {step} does not divide [{t0}, {t1}]")
        return cls(float(t0), float(t1), n)

    @cached_property
    def knots(self):
        # k/n is correctly rounded, so knots land on decimal breakpoints such as 0.7
        k = self.t0 + (self.t1 - self.t0) * (np.arange(self.n_steps + 1) / self.n_steps)
        k[-1] = self.t1
        k.setflags(write=False)
        return k

    @cached_property
    def midpoints(self):
        m = 0.5 * (self.knots[:-1] + self.knots[1:])
        m.setflags(write=False)
        return m

    @property
    def step(self):
        return (self.t1 - self.t0) / self.n_steps

    def __len__(self):
        return self.n_steps + 1

    def index_of(self, t, tol=1e-9):
        """Index of the knot equal to ``t`` (relative tolerance ``tol`` of a step)."""
        k = int(round((t - self.t0) / self.step))
        if k < 0 or k > self.n_steps or abs(self.knots[k] - t) > tol * self.step:
            raise DomainError(f"t = {t} is not a knot of {self}")
        return k

    def cell_of(self, s):
        if s < self.t0 - 1e-12 * self.step or s > self.t1 + 1e-12 * self.step:
            raise DomainError(f"s = {s} outside [{self.t0}, {self.t1}]")
        c = int(min(max(np.floor((s - self.t0) / self.step), 0), self.n_steps - 1))
        # correct the rounding of the division so that s lies in [knots[c], knots[c+1])
        knots = self.knots
        if c > 0 and s < knots[c]:
            c -= 1
        elif c < self.n_steps - 1 and s >= knots[c + 1]:
            c += 1
        return c


@dataclass(frozen=True)
class SpikePerturbation:
    """Adds ``v`` to a control on ``[t, t + eps)``."""

    t: float
    eps: float
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "v", _frozen(np.atleast_1d(self.v)))
        if self.t < 0 or not self.eps > 0:
            raise DomainError(f"spike needs t >= 0 and eps > 0 (got t={self.t}, eps={self.eps})")

    def check_window(self, t0, t1):
        slack = 1e-12 * max(1.0, abs(t1))
        if self.t < t0 - slack or self.t + self.eps > t1 + slack:
            raise DomainError(
                f"spike window [{self.t}, {self.t + self.eps}) not inside [{t0}, {t1}]")
