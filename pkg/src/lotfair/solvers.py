"""LoTFair primal-dual solver and the baseline solvers it is compared against.

All subproblems are solved with projected gradient descent (PGD) using a
backtracking line search; the feasible set only enters through projection
oracles.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import brentq

from .problem import (
    DualPair,
    NonFiniteError,
    RoundProblem,
    SolverConfig,
    Trace,
    TraceRecord,
    check_finite,
    null_round,
)

log = logging.getLogger(__name__)

_MIN_STEP = 1e-20
_STALL_PATIENCE = 25


@dataclass(frozen=True)
class PGDResult:
    x: np.ndarray
    value: float
    iters: int
    residual: float
    stalled: bool


def projected_gradient(value_grad, project, x0, step0, tol, max_iter, step_max=None) -> PGDResult:
    """Minimize a smooth function over a convex set by backtracking PGD.

    ``value_grad(x)`` returns ``(value, gradient)``. The residual is the
    gradient-mapping norm ``||x - P(x - s grad)|| / s`` at the accepted step.
    Iterates never increase the objective beyond roundoff.
    """
    step_max = step0 * 1e4 if step_max is None else step_max
    x = project(np.asarray(x0, dtype=float))
    fx, gx = value_grad(x)
    check_finite(fx, "objective")
    s = step0
    residual = math.inf
    best_residual = math.inf
    since_best = 0
    stalled = False
    k = 0
    for k in range(1, max_iter + 1):
        while True:
            x_new = project(x - s * gx)
            d = x_new - x
            f_new, g_new = value_grad(x_new)
            dd = d @ d
            if not np.isfinite(f_new):
                s *= 0.5
            elif abs(f_new - fx) <= 1e-10 * (1.0 + abs(fx)):
                # function values at roundoff level: use a curvature test instead
                if (g_new - gx) @ d <= dd / s:
                    break
                s *= 0.5
            elif f_new <= fx + gx @ d + dd / (2 * s):
                break
            else:
                s *= 0.5
            if s < _MIN_STEP:
                stalled = True
                break
        if stalled:
            break
        residual = float(np.linalg.norm(d)) / s
        x, fx, gx = x_new, f_new, g_new
        if residual <= tol:
            break
        if residual < best_residual * (1 - 1e-12):
            best_residual, since_best = residual, 0
        else:
            since_best += 1
            if since_best >= _STALL_PATIENCE:
                stalled = True
                break
        s = min(2 * s, step_max)
    return PGDResult(x=x, value=float(fx), iters=k, residual=residual, stalled=stalled)


def lagrangian_value(x, duals: DualPair, f_val: float, g_val: float) -> float:
    """Online Lagrangian ``f + lambda1 g + lambda2 (-g)`` at a known point."""
    check_finite([f_val, g_val], "Lagrangian input")
    return f_val + duals.lambda1 * g_val + duals.lambda2 * (-g_val)


def proximal_objective(x, x_prev, grad_prev, duals: DualPair, gap_prev: Callable, alpha: float) -> float:
    """Linearized cost plus dual-weighted previous gap plus the prox term."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    x = np.asarray(x, dtype=float)
    x_prev = np.asarray(x_prev, dtype=float)
    grad_prev = np.asarray(grad_prev, dtype=float)
    check_finite(x, "x")
    check_finite(x_prev, "x_prev")
    check_finite(grad_prev, "gradient")
    diff = x - x_prev
    g = gap_prev(x)
    return float(grad_prev @ diff + duals.lambda1 * g + duals.lambda2 * (-g) + diff @ diff / (2 * alpha))


def primal_step(problem_prev: RoundProblem, set_now, x_prev, duals: DualPair, config: SolverConfig):
    """Choose the next decision by minimizing the proximal objective over the current set.

    Returns ``(x, inner_iters, inner_residual)``; a stalled inner solve is
    reported through a negative ``inner_iters``.
    """
    alpha = config.alpha
    x_prev = np.asarray(x_prev, dtype=float)
    check_finite(x_prev, "x_prev")
    _, grad_prev = problem_prev.cost_value_grad(x_prev)
    grad_prev = check_finite(np.asarray(grad_prev, dtype=float), "cost gradient")
    net = duals.net

    if problem_prev.gap_affine:
        # objective is a scaled squared distance: minimizer is one projection
        direction = grad_prev + net * np.asarray(problem_prev.gap_grad(x_prev), dtype=float)
        x = set_now(x_prev - alpha * direction)
        check_finite(x, "primal iterate")
        return x, 1, 0.0

    def value_grad(x):
        diff = x - x_prev
        g = problem_prev.gap_value(x)
        val = grad_prev @ diff + net * g + diff @ diff / (2 * alpha)
        grad = grad_prev + net * np.asarray(problem_prev.gap_grad(x)) + diff / alpha
        return float(val), grad

    res = projected_gradient(
        value_grad, set_now, x_prev, alpha, config.inner_tol, config.inner_max_iters, step_max=alpha
    )
    check_finite(res.x, "primal iterate")
    return res.x, (-res.iters if res.stalled else res.iters), res.residual


def dual_step(duals: DualPair, g_val: float, mu: float) -> DualPair:
    if not mu > 0:
        raise ValueError("mu must be positive")
    check_finite(g_val, "gap")
    return DualPair(max(0.0, duals.lambda1 + mu * g_val), max(0.0, duals.lambda2 - mu * g_val))


def _observe(problem: RoundProblem, x):
    cost, _ = problem.cost_value_grad(x)
    gap = problem.gap_value(x)
    check_finite([cost, gap], f"cost/gap at round {problem.t}")
    return float(cost), float(gap)


def _stall_note(iters: int) -> str:
    return "inner-solver-stall" if iters < 0 else ""


def lotfair_run(stream: Iterable[RoundProblem], config: SolverConfig, x_init, on_record=None) -> Trace:
    """Run the long-term-fairness primal-dual loop over a (possibly lazy) stream.

    Round ``t`` only touches round ``t``'s projector before its decision is
    fixed; the cost and gap oracles of round ``t`` are queried afterwards.
    ``on_record`` is called with each record as soon as it is logged.
    """
    x_prev = np.asarray(x_init, dtype=float)
    check_finite(x_prev, "x_init")
    duals = DualPair(0.0, 0.0)
    trace = Trace(method="lotfair", causal=True)
    problem_prev = None
    for t, problem in enumerate(stream, start=1):
        if problem_prev is None:
            problem_prev = null_round(x_prev.size)
        x, iters, residual = primal_step(problem_prev, problem.project, x_prev, duals, config)
        cost, gap = _observe(problem, x)
        record = TraceRecord(t, x, cost, gap, duals.lambda1, duals.lambda2, abs(iters), residual, _stall_note(iters))
        trace.append(record)
        if on_record is not None:
            on_record(record)
        duals = dual_step(duals, gap, config.mu_at(t))
        x_prev, problem_prev = x, problem
    if not trace.records:
        raise ValueError("empty stream")
    trace.final_duals = duals
    return trace


def sgd_baseline_step(problem_prev: RoundProblem, x_prev, alpha: float, project_now=None):
    """Projected online gradient step that ignores the fairness gap."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    x_prev = np.asarray(x_prev, dtype=float)
    _, grad = problem_prev.cost_value_grad(x_prev)
    project = problem_prev.project if project_now is None else project_now
    x = project(x_prev - alpha * np.asarray(grad, dtype=float))
    return check_finite(x, "sgd iterate")


def sgd_run(stream: Iterable[RoundProblem], config: SolverConfig, x_init, on_record=None) -> Trace:
    x_prev = np.asarray(x_init, dtype=float)
    trace = Trace(method="sgd", causal=True)
    problem_prev = None
    for t, problem in enumerate(stream, start=1):
        if problem_prev is None:
            x = check_finite(problem.project(x_prev), "initial point")
        else:
            x = sgd_baseline_step(problem_prev, x_prev, config.alpha, project_now=problem.project)
        cost, gap = _observe(problem, x)
        record = TraceRecord(t, x, cost, gap)
        trace.append(record)
        if on_record is not None:
            on_record(record)
        x_prev, problem_prev = x, problem
    if not trace.records:
        raise ValueError("empty stream")
    return trace


@dataclass(frozen=True)
class InstantaneousResult:
    x: np.ndarray
    constraint_residual: float
    relaxed: bool
    infeasible: bool
    iters: int


def _gap_slab_minimize(problem: RoundProblem, cap: float, x_warm, config: SolverConfig, rho0: float = 10.0):
    """Minimize f_t over the round's set subject to ``|g_t(x)| <= cap``.

    Returns ``(x, violation, iters)``. Uses the projector onto the capped set
    when the problem supplies one, otherwise an augmented Lagrangian on the
    two one-sided constraints ``g - cap <= 0`` and ``-g - cap <= 0``.
    """
    tol = config.inner_tol
    if math.isinf(cap):
        res = projected_gradient(problem.cost_value_grad, problem.project, x_warm, config.alpha,
                                 tol, config.inner_max_iters)
        return res.x, 0.0, res.iters

    if problem.project_capped is not None:
        project = lambda z: problem.project_capped(z, cap)  # noqa: E731
        res = projected_gradient(problem.cost_value_grad, project, x_warm, config.alpha,
                                 tol, config.inner_max_iters)
        violation = max(abs(problem.gap_value(res.x)) - cap, 0.0)
        if problem.residual is not None:
            violation = max(violation, problem.residual(res.x))
        return res.x, violation, res.iters

    nu_hi = nu_lo = 0.0  # multipliers for g <= cap and -g <= cap
    rho = rho0
    escalations = 0
    x = problem.project(np.asarray(x_warm, dtype=float))
    prev_violation = math.inf
    total = 0
    violation = math.inf
    ctol = 10 * tol

    for _ in range(config.outer_max_iters):
        def value_grad(z, nu_hi=nu_hi, nu_lo=nu_lo, rho=rho):
            f, gf = problem.cost_value_grad(z)
            g = problem.gap_value(z)
            w_hi = max(0.0, nu_hi + rho * (g - cap))
            w_lo = max(0.0, nu_lo + rho * (-g - cap))
            val = f + (w_hi ** 2 - nu_hi ** 2) / (2 * rho) + (w_lo ** 2 - nu_lo ** 2) / (2 * rho)
            grad = np.asarray(gf, dtype=float) + (w_hi - w_lo) * np.asarray(problem.gap_grad(z))
            return float(val), grad

        res = projected_gradient(value_grad, problem.project, x, config.alpha, tol, config.inner_max_iters)
        x = res.x
        total += res.iters
        g = problem.gap_value(x)
        violation = max(abs(g) - cap, 0.0)
        new_hi = max(0.0, nu_hi + rho * (g - cap))
        new_lo = max(0.0, nu_lo + rho * (-g - cap))
        shift = max(abs(new_hi - nu_hi), abs(new_lo - nu_lo)) / rho
        nu_hi, nu_lo = new_hi, new_lo
        if violation <= ctol and shift <= ctol:
            break
        if violation > 0.25 * prev_violation and escalations < 3:
            rho *= 10.0
            escalations += 1
        prev_violation = violation
    return x, violation, total


def instantaneous_step(problem_now: RoundProblem, kappa: float, tau: float, x_warm, config: SolverConfig):
    """Per-round minimizer of f_t under the relaxed instantaneous constraint ``g_t^2 <= kappa``.

    Falls back to ``g_t^2 - kappa <= tau`` when the strict version cannot be
    met within the iteration budget.
    """
    if kappa < 0 or tau < kappa:
        raise ValueError("need 0 <= kappa <= tau")
    cap = math.sqrt(kappa)
    x, violation, iters = _gap_slab_minimize(problem_now, cap, x_warm, config)
    if violation <= config.feas_tol:
        return InstantaneousResult(x, violation, False, False, iters)
    relaxed_cap = math.sqrt(kappa + tau)
    log.info("round %d: instantaneous constraint infeasible (residual %.3g); relaxing", problem_now.t, violation)
    x, violation, more = _gap_slab_minimize(problem_now, relaxed_cap, x, config)
    return InstantaneousResult(x, violation, True, violation > config.feas_tol, iters + more)


def instantaneous_run(stream: Iterable[RoundProblem], config: SolverConfig, x_init, kappa: float,
                      tau: float, on_record=None) -> Trace:
    x_warm = np.asarray(x_init, dtype=float)
    trace = Trace(method="instantaneous", causal=True)
    for t, problem in enumerate(stream, start=1):
        res = instantaneous_step(problem, kappa, tau, x_warm, config)
        cost, gap = _observe(problem, res.x)
        note = "infeasible-even-relaxed" if res.infeasible else ("relaxed" if res.relaxed else "")
        record = TraceRecord(t, res.x, cost, gap, inner_iters=res.iters,
                             inner_residual=res.constraint_residual, note=note)
        trace.append(record)
        if on_record is not None:
            on_record(record)
        x_warm = res.x
    if not trace.records:
        raise ValueError("empty stream")
    return trace


@dataclass(frozen=True)
class OfflineResult:
    xs: list
    coupling_residual: float
    converged: bool
    outer_iters: int
    multiplier: float
    stationarity: float = 0.0


_NU_LIMIT = 1e12


class _ProxBlocks:
    """Per-round minimizers of ``f_t + nu g_t + ||x - z_t||^2 / (2 sigma)``.

    The rounds decouple once the multiplier ``nu`` is fixed, so each block is
    a strongly convex PGD solve over its own set, warm started from the last
    solution of that block; fully affine rounds need one projection.
    """

    def __init__(self, problems, centers, config: SolverConfig):
        self.problems = problems
        self.centers = centers
        self.config = config
        self.warm = [c.copy() for c in centers]
        self.sigma = config.alpha

    def solve(self, nu):
        xs = []
        sigma = self.sigma
        for i, (p, z) in enumerate(zip(self.problems, self.centers)):
            if p.cost_affine and p.gap_affine:
                _, gf = p.cost_value_grad(z)
                xs.append(p.project(z - sigma * (np.asarray(gf, dtype=float) + nu * np.asarray(p.gap_grad(z)))))
                continue

            def value_grad(x, p=p, z=z):
                f, gf = p.cost_value_grad(x)
                g = p.gap_value(x)
                diff = x - z
                val = f + nu * g + diff @ diff / (2 * sigma)
                return float(val), np.asarray(gf, dtype=float) + nu * np.asarray(p.gap_grad(x)) + diff / sigma

            res = projected_gradient(value_grad, p.project, self.warm[i], sigma, self.config.inner_tol,
                                     self.config.inner_max_iters, step_max=sigma)
            xs.append(res.x)
        self.warm = [x.copy() for x in xs]
        return xs

    def coupling(self, xs) -> float:
        return float(sum(p.gap_value(x) for p, x in zip(self.problems, xs)))


def _root_multiplier(blocks: _ProxBlocks, nu0: float, tol: float):
    """Multiplier at which the summed gap of the block solutions vanishes.

    The summed gap is nonincreasing in ``nu``; the root is bracketed by
    geometric expansion from ``nu0`` and refined with Brent's method.
    Returns ``(nu, xs)``, or ``None`` when no sign change is found.
    """
    cache = {}

    def total(nu):
        if nu not in cache:
            xs = blocks.solve(nu)
            cache[nu] = (blocks.coupling(xs), xs)
        return cache[nu][0]

    g0 = total(nu0)
    if abs(g0) <= tol:
        return nu0, cache[nu0][1]
    direction = 1.0 if g0 > 0 else -1.0
    step = 1e-3 * (1.0 + abs(nu0))
    near = nu0
    while True:
        far = nu0 + direction * step
        g = total(far)
        if abs(g) <= tol:
            return far, cache[far][1]
        if (g > 0) != (g0 > 0):
            break
        near = far
        step *= 4.0
        if step > _NU_LIMIT:
            return None
    lo, hi = sorted((near, far))
    nu = brentq(lambda v: total(v) if abs(total(v)) > tol else 0.0, lo, hi, xtol=1e-14, rtol=1e-14)
    total(nu)
    return nu, cache[nu][1]


def offline_solve(stream: Sequence[RoundProblem], config: SolverConfig, x_init=None,
                  sigma_growth: float = 4.0, sigma_max: Optional[float] = None) -> OfflineResult:
    """Full-horizon solve of ``min sum f_t`` subject to ``sum g_t = 0``.

    Proximal point iterations on the stacked decision: each outer step
    minimizes ``sum f_t + ||x - z||^2 / (2 sigma)`` under the coupling
    constraint and moves the center ``z`` there. Its only coupling is the
    scalar constraint, handled exactly through its multiplier: for fixed
    ``nu`` the rounds separate into PGD blocks and the summed gap is
    monotone in ``nu``, so a scalar root finder gives the multiplier. Every
    outer iterate therefore meets the coupling constraint up to the root
    tolerance. ``sigma`` starts at ``config.alpha`` and grows by
    ``sigma_growth`` per step up to ``sigma_max`` (default ``128 alpha``);
    the loop stops once the step ``||x - z|| / sigma`` falls below
    ``config.inner_tol`` per coordinate.
    """
    problems = list(stream)
    if not problems:
        raise ValueError("empty stream")
    if x_init is None:
        dim = problems[0].dim
        if dim is None:
            raise ValueError("x_init required when problem dimension is unknown")
        x_init = np.zeros(dim)
    x_init = np.asarray(x_init, dtype=float)
    check_finite(x_init, "x_init")
    sigma_max = 128 * config.alpha if sigma_max is None else sigma_max
    root_tol = min(config.coupling_tol * 1e-2, 1e-7)
    centers = [p.project(x_init) for p in problems]
    blocks = _ProxBlocks(problems, centers, config)
    nu = 0.0
    stationarity = math.inf
    xs = centers
    k = 0
    for k in range(1, config.outer_max_iters + 1):
        found = _root_multiplier(blocks, nu, root_tol)
        if found is None:
            log.warning("offline solve: coupling constraint looks infeasible")
            break
        nu, xs = found
        check_finite(nu, "offline multiplier")
        stationarity = max(float(np.max(np.abs(x - z))) for x, z in zip(xs, blocks.centers)) / blocks.sigma
        blocks.centers = xs
        log.debug("offline outer %d: sigma %.3g, nu %.6g, step %.3g", k, blocks.sigma, nu, stationarity)
        if stationarity <= config.inner_tol:
            break
        blocks.sigma = min(blocks.sigma * sigma_growth, sigma_max)
    total = blocks.coupling(xs)
    converged = abs(total) <= config.coupling_tol and stationarity <= config.inner_tol
    if not converged:
        log.warning("offline solve did not converge: |sum g| = %.3g, step %.3g", abs(total), stationarity)
    return OfflineResult([x.copy() for x in xs], abs(total), converged, k, nu, stationarity)


def offline_run(stream: Sequence[RoundProblem], config: SolverConfig, x_init=None) -> Trace:
    problems = list(stream)
    res = offline_solve(problems, config, x_init)
    trace = Trace(method="offline", causal=False)
    note = "" if res.converged else "offline-nonconvergence"
    for t, (p, x) in enumerate(zip(problems, res.xs), start=1):
        cost, gap = _observe(p, x)
        trace.append(TraceRecord(t, x, cost, gap, inner_iters=res.outer_iters,
                                 inner_residual=res.coupling_residual, note=note))
    return trace


def run_to_trace(stream, x0s, method: str, causal: bool) -> Trace:
    """Wrap precomputed decisions as a trace (used for comparator sequences)."""
    trace = Trace(method=method, causal=causal)
    for t, (p, x) in enumerate(zip(stream, x0s), start=1):
        cost, gap = _observe(p, x)
        trace.append(TraceRecord(t, np.asarray(x, dtype=float), cost, gap))
    return trace


__all__ = [
    "NonFiniteError",
    "PGDResult",
    "projected_gradient",
    "lagrangian_value",
    "proximal_objective",
    "primal_step",
    "dual_step",
    "lotfair_run",
    "sgd_baseline_step",
    "sgd_run",
    "InstantaneousResult",
    "instantaneous_step",
    "instantaneous_run",
    "OfflineResult",
    "offline_solve",
    "offline_run",
    "run_to_trace",
]
