"""Mean-variance market: equilibrium strategy against doing nothing."""

import numpy as np

from tilq import (FeedbackLaw, MCConfig, TimeGrid, build_mv_feedback, eval_mv_J, mv_as_lq,
                  solve_mv_system, spike_test)
from tilq.instances import mv_market

market = mv_market()
grid = TimeGrid(0.0, market.T, 512)
system = solve_mv_system(market, grid)
law = build_mv_feedback(market, system)
print("equilibrium allocation at t=0:", law.alpha[0, :, 0], "x +", law.beta[0])

cfg = MCConfig(n_outer=1024, n_inner=32, seed=1)
for name, control in (("equilibrium", law), ("all cash", FeedbackLaw.zero(grid, market.d))):
    est = eval_mv_J(market, 0.0, market.x0, control, cfg)
    print(f"{name:>12}: J = {est.value:.5f} +- {est.std_error:.5f}")

# a spike away from the cash strategy pays off, so it is not an equilibrium
lq = mv_as_lq(market)
eps = [2.0 ** -k for k in range(3, 8)]
rep = spike_test(lq, FeedbackLaw.zero(grid, market.d), 0.5, [0.5, 0.25], eps, MCConfig(n_outer=256, n_inner=16))
print("cash strategy spike quotients:", np.round(rep.quotient, 4), "->", rep.verdict)
