"""Test-time scaling for flow-matching restoration, at desk scale.

Closed-form linear-interpolant flows over Gaussian mixtures, toy
restoration problems with exact posteriors, analytic verifier ensembles,
the perturb/rollout/rank/select search loop with matched-compute
baselines, and pairwise-preference statistics.
"""

from .flows import (FlowSpec, LatentState, StepSchedule, lookahead,
                    marginal_params, ode_step, score, score_from_velocity,
                    sde_step, solve_ode, velocity)
from .ledger import BudgetLedger
from .search import (TtsConfig, best_of_n, mspde, nfe_formula,
                     particle_sampling, perturb, select_top_m, tts_run)
from .tasks import (DegradationOp, RestorationInstance, SuiteConfig, degrade,
                    make_suite, posterior_flow)
from .verifiers import (RewardReport, VerifierConfig, rank_ensemble,
                        v_fidelity, v_likelihood, v_smooth)

__version__ = "0.1.0"

__all__ = [
    "FlowSpec", "LatentState", "StepSchedule", "BudgetLedger",
    "marginal_params", "velocity", "score", "score_from_velocity",
    "ode_step", "sde_step", "solve_ode", "lookahead",
    "DegradationOp", "RestorationInstance", "SuiteConfig", "degrade",
    "posterior_flow", "make_suite",
    "RewardReport", "VerifierConfig", "rank_ensemble",
    "v_fidelity", "v_likelihood", "v_smooth",
    "TtsConfig", "perturb", "mspde", "select_top_m", "tts_run",
    "best_of_n", "particle_sampling", "nfe_formula",
    "__version__",
]
