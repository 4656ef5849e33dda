"""Default problem instances used by the test suites, the demos and the CLI."""

from __future__ import annotations

import numpy as np

from .model import CoefficientFunction, make_market, make_problem


def scalar_lq():
    return make_problem(T=1.0, x0=1.0, A=0.1, B=1.0, b=0.05, C=0.2, D=0.3, sigma=0.1, Q=0.5,
                        R=1.0, G=1.0, h=0.5, mu1=0.3, mu2=0.2, name="scalar_lq")


def noise_free_lq():
    return make_problem(T=1.0, x0=1.0, A=0.1, B=1.0, b=0.05, Q=0.5, R=1.0, G=1.0, h=0.5,
                        mu1=0.3, mu2=0.2, name="noise_free_lq")


def multi_noise_lq():
    """Two Brownian motions, two controls and coefficients that jump at 0.5."""
    knots = [0.0, 0.5]
    A = CoefficientFunction.piecewise(knots, np.array([0.1, -0.2]).reshape(2, 1, 1))
    B = CoefficientFunction.piecewise(knots, np.array([[1.0, 0.5], [0.8, 0.3]]).reshape(2, 2, 1))
    C = np.array([0.2, 0.1]).reshape(2, 1, 1)
    D = CoefficientFunction.piecewise(
        knots, np.array([[[0.3, 0.0], [0.1, 0.2]], [[0.2, 0.1], [0.0, 0.25]]]).reshape(2, 2, 1, 2))
    return make_problem(T=1.0, x0=1.0, A=A, B=B, b=0.05, C=C, D=D, sigma=[0.1, 0.05], Q=0.5,
                        R=np.diag([1.0, 2.0]), G=1.0, h=0.5, mu1=0.3, mu2=0.2, d=2, l=2,
                        name="multi_noise_lq")


def mv_market():
    return make_market(T=1.0, x0=1.0, r=0.05, theta=[0.4, 0.2], mu1=1.0, mu2=0.5, name="mv_market")


def mv_piecewise():
    r = CoefficientFunction.piecewise([0.0, 0.5], [0.03, 0.06])
    theta = CoefficientFunction.piecewise([0.0, 0.4], [[0.3, 0.1], [0.5, 0.2]])
    return make_market(T=1.0, x0=1.0, r=r, theta=theta, mu1=1.0, mu2=0.5, name="mv_piecewise")


LQ_INSTANCES = {"scalar_lq": scalar_lq, "multi_noise_lq": multi_noise_lq,
                "noise_free_lq": noise_free_lq}
MV_INSTANCES = {"mv_market": mv_market, "mv_piecewise": mv_piecewise}


def default_instances():
    """All five defaults as ``name -> LQProblem | MVMarket``."""
    return {name: f() for name, f in {**LQ_INSTANCES, **MV_INSTANCES}.items()}
