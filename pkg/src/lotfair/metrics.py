"""Performance metrics over traces and the closed-form fairness/regret bounds."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .problem import MissingComparatorError, RoundProblem, SolverConfig, Trace, VacuousBoundError
from .solvers import instantaneous_step, offline_solve

log = logging.getLogger(__name__)

PLAN_FLOOR = 1e-4
N_VAR_SAMPLES = 1024

SUMMARY_KEYS = (
    "regret_star",
    "regret_off",
    "fairness_cum",
    "fairness_bound",
    "regret_bound",
    "lambda_bar",
    "mean_abs_violation",
    "v_xstar",
    "v_gbar",
)


@dataclass(frozen=True)
class BoundConstants:
    """Problem constants: gradient bound G, gap bound M, set diameter R,
    interior margin epsilon, and pointwise constraint variation vbar_g."""

    G: float
    M: float
    R: float
    epsilon: float
    vbar_g: float

    def __post_init__(self):
        for name in ("G", "M", "R", "epsilon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.vbar_g < 0:
            raise ValueError("vbar_g must be nonnegative")
        if self.epsilon <= self.vbar_g:
            warnings.warn("epsilon <= vbar_g: the bounds are vacuous", RuntimeWarning, stacklevel=2)

    @property
    def margin(self) -> float:
        return self.epsilon - self.vbar_g


@dataclass(frozen=True)
class VariationStats:
    v_xstar: float
    v_gbar: float
    n_samples: int = 0

    def __post_init__(self):
        if self.v_xstar < 0 or self.v_gbar < 0:
            raise ValueError("variations must be nonnegative")


def dynamic_fairness(trace: Trace) -> float:
    """Signed cumulative gap over the trace."""
    if len(trace) == 0:
        warnings.warn("empty trace: dynamic fairness is 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.sum(trace.gaps))


def _comparator_costs(trace: Trace, comparator: str):
    if comparator == "star":
        seq = trace.comparator_costs_star
    elif comparator == "offline":
        seq = trace.comparator_costs_off
    else:
        raise ValueError(f"unknown comparator {comparator!r}")
    if seq is None:
        raise MissingComparatorError(f"trace has no {comparator!r} comparator")
    if len(seq) != len(trace):
        raise ValueError("comparator length does not match trace")
    return np.asarray(seq, dtype=float)


def dynamic_regret(trace: Trace, comparator: str = "star") -> float:
    return float(np.sum(trace.costs) - np.sum(_comparator_costs(trace, comparator)))


def mean_abs_violation(trace: Trace) -> float:
    if len(trace) == 0:
        raise ValueError("empty trace")
    return float(np.mean(np.abs(trace.gaps)))


@dataclass(frozen=True)
class ComparatorResult:
    points: list
    ok: list  # per-round convergence flags

    @property
    def all_ok(self) -> bool:
        return all(self.ok)


def per_round_comparator(stream: Sequence[RoundProblem], config: SolverConfig, x_init=None,
                         fallback_kappa: Optional[float] = None, fallback_tau: Optional[float] = None):
    """Per-round fair minimizers ``argmin f_t s.t. g_t = 0`` over the round's set.

    Rounds where the equality-constrained solve fails are flagged; if
    ``fallback_kappa`` is given, the instantaneous-baseline solution replaces
    the missing entry, otherwise the entry is ``None``.
    """
    points, ok = [], []
    for p in stream:
        x0 = x_init if x_init is not None else (np.zeros(p.dim) if p.dim is not None else None)
        res = offline_solve([p], config, x0)
        if res.converged:
            points.append(res.xs[0])
            ok.append(True)
            continue
        log.warning("round %d: per-round comparator failed (|g| = %.3g)", p.t, res.coupling_residual)
        ok.append(False)
        if fallback_kappa is not None:
            tau = fallback_tau if fallback_tau is not None else fallback_kappa
            points.append(instantaneous_step(p, fallback_kappa, tau, res.xs[0], config).x)
        else:
            points.append(None)
    return ComparatorResult(points, ok)


def _sample_points(problem: RoundProblem, rng, n: int):
    if problem.sampler is not None:
        return list(problem.sampler(rng, n))
    if problem.sample_box is not None:
        lo, hi = (np.asarray(b, dtype=float) for b in problem.sample_box)
    else:
        dim = problem.dim if problem.dim is not None else 1
        lo, hi = -np.ones(dim), np.ones(dim)
    raw = rng.uniform(lo, hi, size=(n, lo.size))
    return [problem.project(z) for z in raw]


def variation_stats(stream: Sequence[RoundProblem], comparator_points, n_var_samples: int = N_VAR_SAMPLES,
                    seed: int = 0) -> VariationStats:
    """Accumulated variation of the comparators and of the stacked gap ``[g, -g]``.

    The inner maximum over x is a Monte-Carlo maximum over projected uniform
    samples drawn inside each round's ``sample_box``.
    """
    problems = list(stream)
    pts = [np.asarray(x, dtype=float) for x in comparator_points]
    v_x = float(sum(np.linalg.norm(pts[t] - pts[t - 1]) for t in range(1, len(pts))))
    rng = np.random.default_rng(seed)
    v_g = 0.0
    for t in range(len(problems) - 1):
        samples = _sample_points(problems[t], rng, n_var_samples)
        diffs = [abs(problems[t + 1].gap_value(z) - problems[t].gap_value(z)) for z in samples]
        v_g += math.sqrt(2.0) * max(diffs)
    return VariationStats(v_x, v_g, n_var_samples)


def pointwise_variation(stream: Sequence[RoundProblem], n_var_samples: int = N_VAR_SAMPLES, seed: int = 0) -> float:
    """Sampled estimate of ``max_t max_x |g_{t+1}(x) - g_t(x)|``."""
    problems = list(stream)
    rng = np.random.default_rng(seed)
    best = 0.0
    for t in range(len(problems) - 1):
        for z in _sample_points(problems[t], rng, n_var_samples):
            best = max(best, abs(problems[t + 1].gap_value(z) - problems[t].gap_value(z)))
    return best


def _require_margin(c: BoundConstants) -> float:
    if c.epsilon <= c.vbar_g:
        raise VacuousBoundError(f"epsilon={c.epsilon} <= vbar_g={c.vbar_g}")
    return c.margin


def lambda_bar(c: BoundConstants, alpha: float, mu: float) -> float:
    """Upper bound on both dual variables."""
    margin = _require_margin(c)
    return 2 * mu * c.M + (2 * c.G * c.R + c.R ** 2 / (2 * alpha) + mu * c.M ** 2) / margin


def fairness_bound(c: BoundConstants, alpha: float, mu: float) -> float:
    """Bound on ``|sum_t g_t(x_t)|``; equals ``lambda_bar / mu``."""
    margin = _require_margin(c)
    return 2 * c.M + (2 * c.G * c.R / mu + c.R ** 2 / (2 * mu * alpha) + c.M ** 2) / margin


def regret_bound(c: BoundConstants, alpha: float, mu: float, v: VariationStats, T: int) -> float:
    lam = lambda_bar(c, alpha, mu)
    return (c.R / alpha * v.v_xstar + c.R ** 2 / (2 * alpha) + abs(lam) * v.v_gbar
            + mu * c.M ** 2 * T + alpha * c.G ** 2 * T / 2 + mu * c.M ** 2 / 2)


def stepsize_plan(T: int, v: Optional[VariationStats] = None, plan_floor: float = PLAN_FLOOR):
    """Equal primal/dual step sizes: ``T^(-1/3)``, or ``sqrt(max(V)/T)`` when variations are known."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if v is None:
        step = T ** (-1.0 / 3.0)
    else:
        step = max(math.sqrt(max(v.v_xstar, v.v_gbar) / T), plan_floor)
    return step, step


def dual_max_identity_gap(trace: Trace) -> float:
    """``max_t |l1 - l2| - max(max l1, max l2)`` over recorded and final duals (0 when the identity holds)."""
    l1 = list(trace.lambda1s)
    l2 = list(trace.lambda2s)
    if trace.final_duals is not None:
        l1.append(trace.final_duals.lambda1)
        l2.append(trace.final_duals.lambda2)
    l1, l2 = np.array(l1), np.array(l2)
    return float(np.max(np.abs(l1 - l2)) - max(np.max(l1), np.max(l2)))


def summarize(trace: Trace, constants: Optional[BoundConstants] = None, alpha: Optional[float] = None,
              mu: Optional[float] = None, variation: Optional[VariationStats] = None) -> dict:
    """Metric summary with the keys of ``SUMMARY_KEYS``; unavailable entries are ``None``."""
    out = dict.fromkeys(SUMMARY_KEYS)
    out["fairness_cum"] = dynamic_fairness(trace)
    out["mean_abs_violation"] = mean_abs_violation(trace)
    if trace.comparator_costs_star is not None:
        out["regret_star"] = dynamic_regret(trace, "star")
    if trace.comparator_costs_off is not None:
        out["regret_off"] = dynamic_regret(trace, "offline")
    if variation is not None:
        out["v_xstar"] = variation.v_xstar
        out["v_gbar"] = variation.v_gbar
    if constants is not None and alpha is not None and mu is not None and constants.margin > 0:
        out["lambda_bar"] = lambda_bar(constants, alpha, mu)
        out["fairness_bound"] = fairness_bound(constants, alpha, mu)
        if variation is not None:
            out["regret_bound"] = regret_bound(constants, alpha, mu, variation, len(trace))
    return out
