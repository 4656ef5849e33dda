import numpy as np
import pytest
from hypothesis import given, strategies as st

from tilq import (FeedbackLaw, TimeGrid, adjoint_for_law, bsde_residual, build_adjoint,
                  build_lq_feedback, capital_H, decompose_lambda, euler_maruyama, make_problem,
                  mean_propagator, solve_equilibrium_system, solve_P, solve_psi)

G = TimeGrid(0, 1, 1000)


@pytest.fixture(scope="module")
def eq(lq):
    sys_ = solve_equilibrium_system(lq, G)
    law = build_lq_feedback(lq, sys_)
    ens = euler_maruyama(lq, law, (0.0, lq.x0), G, 1, 64)
    return sys_, law, build_adjoint(lq, sys_, law), ens


def test_terminal_condition_with_propagator(lq, eq):
    sys_, law, adj, ens = eq
    for kt in (0, 250, 999):
        t = G.knots[kt]
        phi1, phi2 = mean_propagator(lq, law, t, 1.0)
        Xt, XT = ens.X[:, kt, 0], ens.X[:, -1, 0]
        target = lq.G[0, 0] * XT - lq.h[0, 0] * (phi1[0, 0] * Xt + phi2[0]) - lq.mu1[0, 0] * Xt - lq.mu2[0]
        assert np.max(np.abs(adj.p(1000, kt, XT, Xt) - target)) < 1e-12
        assert np.max(np.abs(adj.terminal_gap(kt, XT, Xt))) < 1e-12


def test_equilibrium_adjoint_matches_law_adjoint(lq, eq):
    sys_, law, adj, _ = eq
    gen = adjoint_for_law(lq, law)
    for a, b in ((adj.m, gen.m), (adj.nu, gen.nu), (adj.g, gen.g), (adj.phi, gen.phi)):
        assert np.max(np.abs(a.values - b.values)) < 1e-10


def test_lambda_vanishes_on_diagonal(eq):
    _, _, adj, ens = eq
    X, U = ens.X[:, :, 0], ens.u
    worst = max(np.abs(adj.lam(k, k, X[:, k], X[:, k], U[:, k])).max() for k in range(0, 1001, 7))
    assert worst < 1e-9


def test_lambda_off_diagonal_identity(lq, eq):
    _, _, adj, ens = eq
    dec = decompose_lambda(lq, adj, solve_psi(lq, G), ens)
    X, U = ens.X[:, :, 0], ens.u
    for kt, ks in ((100, 600), (0, 999), (300, 301)):
        full = adj.lam(ks, kt, X[:, ks], X[:, kt], U[:, ks])
        expect = dec.lambda2[ks, :, 0] * (dec.xi[:, kt] - dec.xi[:, ks])
        assert np.max(np.abs(full - expect)) < 1e-10
    assert np.abs(dec.lambda2[600]).max() > 0.1


def test_two_point_reconstruction(lq, eq, rng):
    _, _, adj, ens = eq
    dec = decompose_lambda(lq, adj, solve_psi(lq, G), ens)
    X, U = ens.X[:, :, 0], ens.u
    for _ in range(5):
        t1, t2 = sorted(rng.integers(0, 900, 2))
        s = int(rng.integers(t2, 1001))
        d = adj.lam(s, t1, X[:, s], X[:, t1], U[:, s]) - adj.lam(s, t2, X[:, s], X[:, t2], U[:, s])
        assert np.max(np.abs(d - (dec.xi[:, t1] - dec.xi[:, t2]) @ dec.lambda2[s].T)) < 1e-10
        assert np.max(np.abs(dec.reconstruct(s, t1) - adj.lam(s, t1, X[:, s], X[:, t1], U[:, s]))) < 1e-10


def test_lambda2_closed_form():
    p = make_problem(T=1, x0=1, A=0.4, B=0.8, sigma=0.2, R=1.0, Q=0.3, G=1.0, h=0.5, mu1=0.2)
    sys_ = solve_equilibrium_system(p, G)
    law = build_lq_feedback(p, sys_)
    ens = euler_maruyama(p, law, (0.0, p.x0), G, 0, 4)
    dec = decompose_lambda(p, build_adjoint(p, sys_, law), solve_psi(p, G), ens)
    assert np.max(np.abs(dec.lambda2[:, 0, 0] - 0.8 * np.exp(0.4 * (1 - G.knots)))) < 1e-10
    q = p.replace(B=0.0, D=0.5)
    sq = solve_equilibrium_system(q, G)
    lq_ = build_lq_feedback(q, sq)
    ens = euler_maruyama(q, lq_, (0.0, q.x0), G, 0, 4)
    dec = decompose_lambda(q, build_adjoint(q, sq, lq_), solve_psi(q, G), ens)
    assert np.all(dec.lambda2 == 0)


def test_t_free_branch(lq):
    p = lq.replace(h=0.0, mu1=0.0)
    sys_ = solve_equilibrium_system(p, G)
    law = build_lq_feedback(p, sys_)
    adj = build_adjoint(p, sys_, law)
    Xs = np.array([0.3, 1.7])
    for Xt in (np.array([0.0, 0.0]), np.array([5.0, -2.0])):
        assert np.array_equal(adj.p(700, 100, Xs, Xt), adj.p(700, 600, Xs, Xt + 1.0))


def test_k_vanishes_without_noise(lq_free):
    sys_ = solve_equilibrium_system(lq_free, G)
    law = build_lq_feedback(lq_free, sys_)
    adj = build_adjoint(lq_free, sys_, law)
    x = np.linspace(-2, 2, 5)
    assert np.all(adj.k(300, x, adj.control(300, x)) == 0)


def test_inert_lambda_is_zero():
    p = make_problem(T=1, x0=1, A=0.3, C=0.2, sigma=0.4, Q=1.0, G=1.0, h=0.3, mu1=0.5, mu2=0.1)
    law = FeedbackLaw.zero(G, 1)
    adj = adjoint_for_law(p, law)
    x = np.linspace(-1, 1, 9)
    u = adj.control(10, x)
    assert np.all(adj.lam(500, 10, x, x[::-1], adj.control(500, x)) == 0)
    assert np.all(adj.lam(10, 10, x, x, u) == 0)


def test_capital_H_special_cases(lq):
    P = solve_P(lq, G)
    assert np.array_equal(capital_H(lq.replace(D=0.0), P, 0.3), lq.R(0.3))
    q = make_problem(T=1, x0=1, A=0.2, C=0.1, D=1.0, Q=0.4, G=1.0)
    Pq = solve_P(q, G)
    assert capital_H(q, Pq, 0.3)[0, 0] == pytest.approx(Pq.P(0.3)[0, 0], rel=1e-15)


@given(st.integers(0, 2 ** 32))
def test_capital_H_psd(seed):
    rng = np.random.default_rng(seed)
    n, l, d = 2, 2, 2
    A = rng.normal(size=(n, n))
    C = rng.normal(size=(d, n, n)) * 0.5
    D = rng.normal(size=(d, n, l))
    Qh = rng.normal(size=(n, n))
    Rh = rng.normal(size=(l, l))
    Gh = rng.normal(size=(n, n))
    p = make_problem(T=1, x0=[1.0, 0.0], A=A, B=rng.normal(size=(l, n)), C=C, D=D, Q=Qh @ Qh.T,
                     R=Rh @ Rh.T, G=Gh @ Gh.T, d=d, l=l)
    P = solve_P(p, TimeGrid(0, 1, 100))
    for s in (0.0, 0.5, 1.0):
        assert np.linalg.eigvalsh(capital_H(p, P, s)).min() >= -1e-12


def test_residual_pure_ode_defect(lq_free):
    sys_ = solve_equilibrium_system(lq_free, G)
    law = build_lq_feedback(lq_free, sys_)
    ens = euler_maruyama(lq_free, law, (0.0, lq_free.x0), G, 0, 2)
    rep = bsde_residual(lq_free, build_adjoint(lq_free, sys_, law), ens, 0.0)
    assert rep.max_defect < 1e-6 and rep.passed
    coarse = TimeGrid(0, 1, 250)
    sc = solve_equilibrium_system(lq_free, coarse)
    lc = build_lq_feedback(lq_free, sc)
    rc = bsde_residual(lq_free, build_adjoint(lq_free, sc, lc),
                       euler_maruyama(lq_free, lc, (0.0, lq_free.x0), coarse, 0, 2), 0.0)
    # defect is the second-order local Euler error: C * ds per unit time
    assert rc.max_defect / rep.max_defect == pytest.approx(16, rel=0.2)
    assert rep.max_defect < rep.order_constant * G.step ** 2 * 1.0001


def test_residual_noisy_band(lq, eq):
    sys_, law, adj, _ = eq
    ens = euler_maruyama(lq, law, (0.0, lq.x0), G, 3, 2000)
    rep = bsde_residual(lq, adj, ens, 0.25)
    assert rep.passed, (rep.max_z, rep.z_critical, rep.max_defect)
    bad = adjoint_for_law(lq, law.perturbed(0.1))
    rep_bad = bsde_residual(lq, bad, ens, 0.25)
    assert not rep_bad.passed
