"""Problem files, trajectory CSVs and run hashing.

Problem file schema (JSON or TOML)::

    schema_version = "1"          # required
    kind = "lq" | "mv"            # required
    name = "..."                  # optional
    T, x0                         # required
    # lq: A B b C D sigma Q R (optional, default 0), G h mu1 mu2 (required), d l (default 1)
    # mv: r theta mu1 mu2 (required)

Coefficients are scalars, nested arrays of the target shape, or tables
``{kind, knots, values}`` with ``kind`` one of ``constant``,
``piecewise-constant`` and ``sampled-on-grid``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError
from .model import (LQProblem, MVMarket, coefficient_to_dict, make_market, make_problem, validate,
                    validate_market)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCHEMA_VERSION = "1"
LQ_COEFFS = ("A", "B", "b", "C", "D", "sigma", "Q", "R")
LQ_REQUIRED = ("T", "x0", "G", "h", "mu1", "mu2")
MV_REQUIRED = ("T", "x0", "r", "theta", "mu1", "mu2")


def _parse_text(text, suffix):
    if suffix == ".toml":
        try:
            return tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"TOML parse error: {exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"JSON parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None


def load_problem_dict(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read problem file {path}: {exc.strerror}") from None
    data = _parse_text(text, path.suffix.lower())
    if not isinstance(data, dict):
        raise ConfigError("problem: top level must be a table/object")
    return data


def problem_from_dict(data):
    """Build an :class:`LQProblem` or :class:`MVMarket` from a parsed file.

    Raises
    ------
    ConfigError
        With the offending field path, e.g. ``problem.mu1: required field missing``.
    """
    version = data.get("schema_version")
    if version is None:
        raise ConfigError("problem.schema_version: required field missing")
    if str(version) != SCHEMA_VERSION:
        raise ConfigError(f"problem.schema_version: unsupported version {version!r}")
    kind = data.get("kind")
    if kind not in ("lq", "mv"):
        raise ConfigError(f"problem.kind: expected 'lq' or 'mv', got {kind!r}")
    required = LQ_REQUIRED if kind == "lq" else MV_REQUIRED
    for key in required:
        if key not in data:
            raise ConfigError(f"problem.{key}: required field missing")
    allowed = set(required) | {"schema_version", "kind", "name"}
    if kind == "lq":
        allowed |= set(LQ_COEFFS) | {"d", "l"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"problem.{unknown[0]}: unknown field")
    name = str(data.get("name", ""))
    try:
        if kind == "mv":
            market = make_market(data["T"], data["x0"], data["r"], data["theta"], data["mu1"],
                                 data["mu2"], name=name)
            issues = validate_market(market)
            obj = market
        else:
            kw = {k: data[k] for k in LQ_COEFFS if k in data}
            obj = make_problem(data["T"], data["x0"], **kw, G=data["G"], h=data["h"],
                               mu1=data["mu1"], mu2=data["mu2"], d=int(data.get("d", 1)),
                               l=int(data.get("l", 1)), name=name)
            issues = validate(obj)
    except (DimensionError, ConfigError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"problem: {exc}") from None
    if issues:
        raise ConfigError("problem: " + "; ".join(issues))
    return obj


def load_problem(path):
    return problem_from_dict(load_problem_dict(path))


def problem_to_dict(obj):
    """Inverse of :func:`problem_from_dict` (JSON-serialisable)."""
    if isinstance(obj, MVMarket):
        return {"schema_version": SCHEMA_VERSION, "kind": "mv", "name": obj.name, "T": obj.T,
                "x0": obj.x0, "r": coefficient_to_dict(obj.r), "theta": coefficient_to_dict(obj.theta),
                "mu1": obj.mu1, "mu2": obj.mu2}
    if isinstance(obj, LQProblem):
        out = {"schema_version": SCHEMA_VERSION, "kind": "lq", "name": obj.name, "T": obj.T,
               "x0": obj.x0.tolist(), "d": obj.d, "l": obj.l}
        out.update({k: coefficient_to_dict(getattr(obj, k)) for k in LQ_COEFFS})
        out.update({k: getattr(obj, k).tolist() for k in ("G", "h", "mu1", "mu2")})
        return out
    raise ConfigError(f"cannot serialise {type(obj).__name__}")


def write_problem(obj, path):
    with open(path, "w") as fh:
        json.dump(problem_to_dict(obj), fh, indent=2)


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(obj):
    """SHA-256 of the canonical JSON encoding of ``obj``."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def write_columns_csv(path, columns):
    """CSV with a header row; floats written with ``repr`` so they round-trip exactly."""
    keys = list(columns)
    cols = [np.asarray(columns[k], float).reshape(len(columns[keys[0]]), -1) for k in keys]
    header = []
    for k, c in zip(keys, cols):
        header += [k] if c.shape[1] == 1 else [f"{k}_{i}" for i in range(c.shape[1])]
    rows = np.concatenate(cols, axis=1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) for v in row])


def read_columns_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        data = np.array([[float(v) for v in row] for row in r])
    return {k: data[:, i] for i, k in enumerate(header)}
