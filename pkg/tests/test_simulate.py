import numpy as np
import pytest

from tilq import (FeedbackLaw, OpenLoopControl, PathEnsemble, SpikePerturbation, TimeGrid,
                  apply_spike, conditional_restart, euler_maruyama, make_market, make_problem,
                  mean_propagator, mv_as_lq, restart_ensemble, simulate_wealth)
from tilq.errors import DomainError
from tilq.simulate import _window_mask

G64 = TimeGrid(0, 1, 64)


def zero_law(grid, l=1):
    return FeedbackLaw.zero(grid, l)


def test_initial_state_and_increment_variance(lq, eq256):
    ens = euler_maruyama(lq, eq256[1], (0.0, lq.x0), eq256[1].grid, 3, 4000)
    assert np.all(ens.X[:, 0, 0] == lq.x0[0])
    h = eq256[1].grid.step
    v = ens.dW.var(axis=0)[:, 0]
    # per-cell sample variance over 4000 paths has relative SD sqrt(2/3999)
    assert abs(v.mean() / h - 1) < 4 * np.sqrt(2 / 3999 / 256)
    assert np.all(np.abs(v / h - 1) < 5 * np.sqrt(2 / 3999))


def test_frozen_state():
    p = make_problem(T=1, x0=2.5, D=0.4, Q=1.0, R=1.0)
    ens = euler_maruyama(p, zero_law(G64), (0.0, p.x0), G64, 0, 50)
    assert np.all(ens.X == 2.5)


def test_noise_free_exponential():
    p = make_problem(T=1, x0=1.5, A=0.4)
    errs = []
    for n in (100, 200, 400):
        g = TimeGrid(0, 1, n)
        XT = euler_maruyama(p, zero_law(g), (0.0, p.x0), g, 0, 1).X[0, -1, 0]
        assert XT == pytest.approx(1.5 * (1 + 0.4 / n) ** n, rel=1e-13)
        errs.append(abs(XT - 1.5 * np.exp(0.4)))
    assert errs[0] / errs[1] == pytest.approx(2, rel=0.05)
    assert errs[-1] < 1.5 * 0.4 ** 2 / 400


def test_martingale_mean():
    p = make_problem(T=1, x0=0.7, sigma=1.0)
    XT = euler_maruyama(p, zero_law(G64), (0.0, p.x0), G64, 5, 20000).X[:, -1, 0]
    assert abs(XT.mean() - 0.7) < 3 * XT.std() / np.sqrt(XT.size)


def test_reproducible_across_workers(lq, eq256):
    law = eq256[1]
    a = euler_maruyama(lq, law, (0.0, lq.x0), law.grid, 9, 1500, workers=1)
    b = euler_maruyama(lq, law, (0.0, lq.x0), law.grid, 9, 1500, workers=4)
    c = euler_maruyama(lq, law, (0.0, lq.x0), law.grid, 9, 1500)
    for key in ("X", "u", "dW"):
        assert np.array_equal(getattr(a, key), getattr(b, key))
        assert np.array_equal(getattr(a, key), getattr(c, key))


def test_threads_env_cap(lq, eq256, monkeypatch):
    law = eq256[1]
    a = euler_maruyama(lq, law, (0.0, lq.x0), law.grid, 9, 600, workers=3)
    monkeypatch.setenv("TILQ_THREADS", "1")
    b = euler_maruyama(lq, law, (0.0, lq.x0), law.grid, 9, 600, workers=3)
    assert np.array_equal(a.X, b.X)


def test_binary_dump_round_trip(tmp_path, lq_multi):
    g = TimeGrid(0, 1, 16)
    ens = euler_maruyama(lq_multi, OpenLoopControl(g, np.ones((17, 2))), (0.0, lq_multi.x0), g, 1, 7)
    ens.write_binary(tmp_path / "p.bin")
    back = PathEnsemble.read_binary(tmp_path / "p.bin")
    for key in ("X", "u", "dW"):
        assert np.array_equal(getattr(ens, key), getattr(back, key))
    assert back.grid == g and back.seed == 1
    raw = (tmp_path / "p.bin").read_bytes()
    assert raw[:8] == b"TILQPATH"
    ens.write_csv(tmp_path / "p.csv")
    rows = (tmp_path / "p.csv").read_text().splitlines()
    assert len(rows) == 1 + 7 * 17


def test_spike_support_and_mass(eq256):
    law = eq256[1]
    g = law.grid
    for k in (1, 5, 32):
        sp = SpikePerturbation(g.knots[10], k * g.step, [2.0])
        assert _window_mask(g, sp).sum() == k
    base = euler_maruyama(make_problem(T=1, x0=1, B=1.0, R=1.0), law, (0.0, [1.0]), g, 0, 1)
    sp = SpikePerturbation(g.knots[10], 9 * g.step, [-1.5])
    spiked = euler_maruyama(make_problem(T=1, x0=1, B=1.0, R=1.0), apply_spike(law, sp), (0.0, [1.0]), g, 0, 1)
    du = np.abs(spiked.u[0, :-1, 0] - law.alpha[:-1, 0, 0] * base.X[0, :-1, 0] - law.beta[:-1, 0])
    assert du.sum() * g.step == pytest.approx(1.5 * 9 * g.step, rel=1e-12)
    with pytest.raises(DomainError):
        euler_maruyama(make_problem(T=1, x0=1), apply_spike(law, SpikePerturbation(0.99, 0.5, [1.0])),
                       (0.0, [1.0]), g, 0, 1)


def test_zero_spike_identical(lq, eq256):
    law = eq256[1]
    a = euler_maruyama(lq, law, (0.0, lq.x0), law.grid, 2, 20)
    b = euler_maruyama(lq, apply_spike(law, SpikePerturbation(0.25, 0.125, [0.0])), (0.0, lq.x0), law.grid, 2, 20)
    assert np.array_equal(a.X, b.X)


def test_spike_without_control_channels(eq256):
    p = make_problem(T=1, x0=1, A=0.1, C=0.2, sigma=0.3, R=1.0)
    law = eq256[1]
    a = euler_maruyama(p, law, (0.0, p.x0), law.grid, 2, 20)
    b = euler_maruyama(p, apply_spike(law, SpikePerturbation(0.25, 0.125, [3.0])), (0.0, p.x0), law.grid, 2, 20)
    assert np.array_equal(a.X, b.X)


def test_restart_points(lq, eq256):
    law = eq256[1]
    ens = euler_maruyama(lq, law, (0.0, lq.x0), law.grid, 4, 30)
    pts = conditional_restart(ens, 0.0)
    assert all(p.x[0] == lq.x0[0] for p in pts)
    seen = {(p.stream) for t in (0.0, 0.25, 0.5) for p in conditional_restart(ens, t)}
    assert len(seen) == 90


def test_restart_conditional_mean(lq, eq256):
    law = eq256[1]
    g = law.grid
    ens = euler_maruyama(lq, law, (0.0, lq.x0), g, 4, 16)
    inner = restart_ensemble(lq, law, ens, 0.5, 2000)
    XT = inner.X[:, -1, 0].reshape(16, 2000)
    phi1, phi2 = mean_propagator(lq, law, 0.5, 1.0)
    target = phi1[0, 0] * ens.X[:, g.index_of(0.5), 0] + phi2[0]
    # Euler bias is O(h); allow it on top of the CLT band
    se = XT.std(axis=1, ddof=1) / np.sqrt(2000)
    assert np.all(np.abs(XT.mean(1) - target) < 3.5 * se + 2 * g.step)


def test_mean_propagator_closed_forms(eq256):
    law = zero_law(TimeGrid(0, 1, 100))
    phi1, phi2 = mean_propagator(make_problem(T=1, x0=1), law, 0.2, 0.9)
    assert phi1[0, 0] == 1.0 and phi2[0] == 0.0
    phi1, phi2 = mean_propagator(make_problem(T=1, x0=1, A=0.6, C=0.3, sigma=0.2), law, 0.2, 0.9)
    assert phi1[0, 0] == pytest.approx(np.exp(0.6 * 0.7), rel=1e-10) and abs(phi2[0]) < 1e-15


def test_mean_propagator_vs_monte_carlo(lq_multi):
    g = TimeGrid(0, 1, 128)
    law = FeedbackLaw.from_knots(g, np.tile([[[-0.3], [0.2]]], (129, 1, 1)), np.tile([0.1, -0.2], (129, 1)))
    XT = euler_maruyama(lq_multi, law, (0.0, lq_multi.x0), g, 8, 20000).X[:, -1, 0]
    phi1, phi2 = mean_propagator(lq_multi, law, 0.0, 1.0)
    target = phi1[0, 0] * lq_multi.x0[0] + phi2[0]
    assert abs(XT.mean() - target) < 3 * XT.std() / np.sqrt(XT.size) + 2 * g.step


def test_weak_order_one():
    p = make_problem(T=1, x0=1.0, A=1.0, sigma=0.05)
    errs = []
    for n in (8, 16, 32):
        g = TimeGrid(0, 1, n)
        XT = euler_maruyama(p, zero_law(g), (0.0, p.x0), g, 1, 20000).X[:, -1, 0]
        errs.append(abs(XT.mean() - np.e))
    slope = np.polyfit(np.log([1 / 8, 1 / 16, 1 / 32]), np.log(errs), 1)[0]
    assert 0.7 <= slope <= 1.3


def test_wealth_matches_embedding(market):
    g = TimeGrid(0, 1, 50)
    law = FeedbackLaw.from_knots(g, np.tile([[[0.2], [-0.1]]], (51, 1, 1)), np.tile([0.3, 0.1], (51, 1)))
    a = simulate_wealth(market, law, (0.0, market.x0), g, 6, 100)
    b = euler_maruyama(mv_as_lq(market), law, (0.0, [market.x0]), g, 6, 100)
    assert np.max(np.abs(a.X - b.X)) < 1e-13
