"""Open-loop equilibria for time-inconsistent linear-quadratic control.

Build a problem with :func:`make_problem` or :func:`make_market`, solve the
backward system, turn it into a feedback law, then simulate and verify it.
"""

__version__ = "0.1.0"

from .model import (CoefficientFunction, LQProblem, MVMarket, SpikePerturbation, TimeGrid,
                    make_market, make_problem, mv_as_lq, validate, validate_market)
from .detsolve import (EquilibriumSystem, MVSystem, PsiFlow, SecondOrderP, Trajectory,
                       rk4_integrate, solve_equilibrium_system, solve_mv_system, solve_P,
                       solve_psi)
from .feedback import FeedbackLaw, build_lq_feedback, build_mv_feedback
from .simulate import (MeanFlow, OpenLoopControl, PathEnsemble, SpikedControl, apply_spike,
                       conditional_restart, euler_maruyama, mean_propagator, restart_ensemble,
                       simulate_wealth)
from .objective import JEstimate, MCConfig, eval_J, eval_mv_J
from .adjoint import (AdjointAnsatz, LambdaDecomposition, ResidualReport, adjoint_for_law,
                      bsde_residual, build_adjoint, capital_H, decompose_lambda)
from .verify import (equilibrium_residual, expansion_check, lebesgue_check, spike_suite,
                     spike_test, uniqueness_probe_lq, uniqueness_probe_mv)
