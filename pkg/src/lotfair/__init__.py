"""Online optimization with long-term fairness constraints."""

from .metrics import (
    BoundConstants,
    VariationStats,
    dynamic_fairness,
    dynamic_regret,
    fairness_bound,
    lambda_bar,
    mean_abs_violation,
    per_round_comparator,
    regret_bound,
    stepsize_plan,
    variation_stats,
)
from .problem import DualPair, RoundProblem, SolverConfig, Trace, TraceRecord
from .solvers import (
    dual_step,
    instantaneous_run,
    instantaneous_step,
    lagrangian_value,
    lotfair_run,
    offline_solve,
    primal_step,
    proximal_objective,
    sgd_baseline_step,
    sgd_run,
)

__version__ = "0.1.0"
