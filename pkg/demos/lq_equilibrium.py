"""Solve the scalar LQ instance, simulate its equilibrium and check the residual."""

import numpy as np

from tilq import (TimeGrid, build_lq_feedback, euler_maruyama, solve_equilibrium_system,
                  uniqueness_probe_lq, equilibrium_residual)
from tilq.instances import scalar_lq

problem = scalar_lq()
grid = TimeGrid.with_step(0.0, problem.T, 1e-3)
system = solve_equilibrium_system(problem, grid)
law = build_lq_feedback(problem, system)

for t in (0.0, 0.25, 0.5, 0.75, 1.0):
    k = grid.index_of(t)
    print(f"t={t:4.2f}  M={system.M.values[k]: .6f}  N={system.N.values[k]: .6f}  "
          f"alpha={law.alpha[k, 0, 0]: .6f}  beta={law.beta[k, 0]: .6f}")

ens = euler_maruyama(problem, law, (0.0, problem.x0), grid, seed=0, npaths=4096)
print("E[X_T] ~", float(np.mean(ens.X[:, -1, 0])))
res = equilibrium_residual(problem, law, grid, ens)
print(f"sup |Lambda(t;t)| = {res.sup:.2e} -> {res.verdict}")
bumped = law.perturbed(0.1)
res_b = equilibrium_residual(problem, bumped, grid, euler_maruyama(problem, bumped, (0.0, problem.x0), grid, 0, 4096))
print(f"after a 0.1 gain bump: {res_b.sup:.2e} -> {res_b.verdict}")
probe = uniqueness_probe_lq(problem, system)
print(f"uniqueness probe: sup {probe.sup_norm:.1e}, {len(probe.windows)} windows -> {probe.verdict}")
