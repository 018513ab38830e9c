"""Experiment runner: builds the configured stream, runs every method, writes results."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict

from . import __version__
from .config import ExperimentConfig
from .metrics import (
    SUMMARY_KEYS,
    BoundConstants,
    VariationStats,
    fairness_bound,
    lambda_bar,
    per_round_comparator,
    regret_bound,
    summarize,
    variation_stats,
)
from .problem import LotFairError, RoundProblem, Trace
from .solvers import instantaneous_run, instantaneous_step, lotfair_run, offline_run, run_to_trace, sgd_run

log = logging.getLogger(__name__)

TRACE_HEADER = ("t", "cost", "gap", "lambda1", "lambda2", "cum_gap", "avg_cost")
CAUSAL_METHODS = ("lotfair", "sgd", "instantaneous")
METHOD_ORDER = ("lotfair", "sgd", "instantaneous", "offline", "star")


class CausalityError(LotFairError, RuntimeError):
    """A round's oracle was queried before the previous round was logged."""


# --- streams -----------------------------------------------------------------


def _kappa_tau(section):
    kappa = section.kappa
    tau = section.tau if section.tau is not None else 10 * kappa
    return kappa, tau


def _toy_stream(cfg: ExperimentConfig) -> List[RoundProblem]:
    from .toy import cosine_stream, pinned_gap_stream

    c = cfg.toy
    if c.family == "cosine":
        return cosine_stream(cfg.horizon, c.target, c.center, c.amplitude, c.frequency, c.lower, c.upper)
    return pinned_gap_stream(cfg.horizon, c.target, c.center, c.lower, c.upper)


def _classify_stream(cfg: ExperimentConfig) -> Iterator[RoundProblem]:
    from .classify import adult_ingest, classify_round, synthetic_biased_stream

    c = cfg.classify
    if c.source == "synthetic":
        batches = synthetic_biased_stream(cfg.horizon, c.n_features, c.bias_strength, cfg.seed, c.batch_size)
    else:
        batches = adult_ingest(c.path, c.batch_size, c.sensitive_attr, cfg.seed, n_rounds=cfg.horizon)
    for batch in batches:
        yield classify_round(batch, c.radius, c.reduction)


def _p2p_grid(cfg: ExperimentConfig):
    from .p2p import ieee14, read_grid

    c = cfg.p2p
    if c.grid:
        return read_grid(c.grid, limit=c.line_limit)
    return ieee14(limit=c.line_limit)


def _p2p_stream(cfg: ExperimentConfig) -> Iterator[RoundProblem]:
    from .p2p import MarketParams, gen_random_round, gen_timevarying_round, market_problem, oasis_ingest

    c = cfg.p2p
    grid = _p2p_grid(cfg)
    kappa, tau = _kappa_tau(c)
    params = MarketParams(utility_price=c.utility_price, wheeling_rate=c.gamma, noise_std=c.noise_std,
                          frequency=c.frequency)
    if c.setting == "oasis":
        rounds = oasis_ingest(c.path, grid.groups, c.frac, c.dirichlet_conc, cfg.seed, params, c.scale)
        if len(rounds) < cfg.horizon:
            raise ValueError(f"{c.path} has {len(rounds)} hours, horizon is {cfg.horizon}")
        rounds = iter(rounds[:cfg.horizon])
    else:
        gen = gen_random_round if c.setting == "random" else gen_timevarying_round
        rounds = (gen(params, cfg.seed, t, grid.groups) for t in range(1, cfg.horizon + 1))
    for rnd in rounds:
        yield market_problem(rnd, grid, kappa, tau, denominator=c.denominator)


def build_stream(cfg: ExperimentConfig) -> Iterator[RoundProblem]:
    """A fresh lazy stream of the configured rounds; each call regenerates it from the seed."""
    if cfg.app == "toy":
        return iter(_toy_stream(cfg))
    if cfg.app == "classify":
        return _classify_stream(cfg)
    return _p2p_stream(cfg)


def decision_dim(cfg: ExperimentConfig) -> int:
    if cfg.app == "toy":
        return 1
    if cfg.app == "classify":
        if cfg.classify.source == "synthetic":
            return cfg.classify.n_features + 1
        first = next(build_stream(cfg))
        return first.dim
    return _p2p_grid(cfg).n_nodes ** 2


def instantaneous_thresholds(cfg: ExperimentConfig):
    return _kappa_tau(getattr(cfg, cfg.app))


# --- causality audit -----------------------------------------------------------


class CausalityAudit:
    """Wraps a stream so that round t's oracles fail before round t-1 is logged."""

    def __init__(self):
        self.logged = 0

    def on_record(self, record):
        self.logged = record.t

    def _guard(self, t, fn, name):
        def wrapped(*args, **kwargs):
            if self.logged < t - 1:
                raise CausalityError(f"round {t} {name} queried while only {self.logged} rounds are logged")
            return fn(*args, **kwargs)

        return wrapped

    def wrap(self, stream) -> Iterator[RoundProblem]:
        for t, p in enumerate(stream, start=1):
            kwargs = {name: self._guard(t, getattr(p, name), name)
                      for name in ("cost_value_grad", "gap_value", "gap_grad", "project")}
            if p.project_capped is not None:
                kwargs["project_capped"] = self._guard(t, p.project_capped, "project_capped")
            yield replace(p, **kwargs)


# --- running -------------------------------------------------------------------


@dataclass
class MethodResult:
    method: str
    causal: bool
    trace: Optional[Trace] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.trace is not None


@dataclass
class RunResult:
    config: ExperimentConfig
    methods: Dict[str, MethodResult] = field(default_factory=dict)
    summaries: Dict[str, dict] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @property
    def lotfair_ok(self) -> bool:
        res = self.methods.get("lotfair")
        return res is not None and res.ok


def _run_method(method: str, cfg: ExperimentConfig, x0: np.ndarray, star_points=None) -> Trace:
    solver = cfg.solver_config()
    if method in CAUSAL_METHODS:
        audit = CausalityAudit()
        stream = audit.wrap(build_stream(cfg))
        if method == "lotfair":
            return lotfair_run(stream, solver, x0, on_record=audit.on_record)
        if method == "sgd":
            return sgd_run(stream, solver, x0, on_record=audit.on_record)
        kappa, tau = instantaneous_thresholds(cfg)
        return instantaneous_run(stream, solver, x0, kappa, tau, on_record=audit.on_record)
    if method == "offline":
        return offline_run(list(build_stream(cfg)), solver, x0)
    if method == "star":
        return run_to_trace(list(build_stream(cfg)), star_points, "star", causal=False)
    raise ValueError(f"unknown method {method!r}")


def _star_points(cfg: ExperimentConfig, x0, instantaneous: Optional[Trace]):
    problems = list(build_stream(cfg))
    res = per_round_comparator(problems, cfg.solver_config(), x0)
    points = list(res.points)
    for i, ok in enumerate(res.ok):
        if not ok:
            if instantaneous is not None:
                points[i] = instantaneous.records[i].x
            else:
                kappa, tau = instantaneous_thresholds(cfg)
                points[i] = instantaneous_step(problems[i], kappa, tau, x0, cfg.solver_config()).x
    return points, res.ok


def bound_constants(cfg: ExperimentConfig) -> Optional[BoundConstants]:
    """Analytic constants for the cosine toy family, else the ``bounds.*`` keys when all are given."""
    b = cfg.bounds
    given = (b.G, b.M, b.R, b.epsilon, b.vbar_g)
    if all(v is not None for v in given):
        return BoundConstants(*given)
    if cfg.app == "toy" and cfg.toy.family == "cosine":
        from .toy import cosine_constants

        c = cfg.toy
        return cosine_constants(cfg.horizon, c.target, c.center, c.amplitude, c.frequency, c.lower, c.upper)
    return None


def analytic_variation(cfg: ExperimentConfig) -> Optional[VariationStats]:
    b = cfg.bounds
    if b.v_xstar is not None and b.v_gbar is not None:
        return VariationStats(b.v_xstar, b.v_gbar)
    if cfg.app == "toy" and cfg.toy.family == "cosine":
        from .toy import cosine_centers

        c = cfg.toy
        step = float(np.sum(np.abs(np.diff(cosine_centers(cfg.horizon, c.center, c.amplitude, c.frequency)))))
        return VariationStats(step, math.sqrt(2.0) * step)
    return None


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    """Run LoTFair and the configured baselines; a failing method does not stop the others."""
    result = RunResult(cfg)
    result.provenance = {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "code_version": __version__,
        "app": cfg.app,
        "horizon": cfg.horizon,
    }
    x0 = np.zeros(decision_dim(cfg))
    methods = [m for m in METHOD_ORDER if m == "lotfair" or m in cfg.baselines]
    star_points = None
    for method in methods:
        causal = method in CAUSAL_METHODS
        try:
            if method == "star":
                inst = result.methods.get("instantaneous")
                star_points, ok = _star_points(cfg, x0, inst.trace if inst is not None else None)
                if not all(ok):
                    log.warning("star comparator: %d rounds replaced by the instantaneous solution",
                                ok.count(False))
            trace = _run_method(method, cfg, x0, star_points)
            result.methods[method] = MethodResult(method, causal, trace)
        except Exception as exc:  # isolate failures per method
            log.error("%s failed: %s", method, exc)
            result.methods[method] = MethodResult(method, causal, error=f"{type(exc).__name__}: {exc}")
    _attach_comparators(result)
    _summarize(result)
    return result


def _attach_comparators(result: RunResult):
    star = result.methods.get("star")
    off = result.methods.get("offline")
    star_costs = list(star.trace.costs) if star is not None and star.ok else None
    off_costs = list(off.trace.costs) if off is not None and off.ok else None
    for res in result.methods.values():
        if res.ok:
            res.trace.comparator_costs_star = star_costs
            res.trace.comparator_costs_off = off_costs


def _summarize(result: RunResult):
    cfg = result.config
    constants = bound_constants(cfg)
    variation = analytic_variation(cfg)
    star = result.methods.get("star")
    if variation is None and star is not None and star.ok:
        try:
            variation = variation_stats(list(build_stream(cfg)), star.trace.decisions,
                                        cfg.metrics.n_var_samples, cfg.seed)
        except Exception as exc:
            log.warning("variation statistics unavailable: %s", exc)
    if constants is not None and constants.margin <= 0:
        log.warning("bound constants give a vacuous bound (epsilon <= vbar_g)")
    alpha, mu = cfg.solver.alpha, cfg.solver.mu
    for name, res in result.methods.items():
        if res.ok:
            result.summaries[name] = summarize(res.trace, constants, alpha, mu, variation)
        else:
            result.summaries[name] = dict.fromkeys(SUMMARY_KEYS)


# --- outputs ---------------------------------------------------------------------


class MethodSummary(BaseModel):
    model_config = ConfigDict(extra="forbid")

    status: str
    reason: Optional[str]
    causal: bool
    metrics: Dict[str, Optional[float]]


class Provenance(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config_hash: str
    seed: int
    code_version: str
    app: str
    horizon: int


class SummaryFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    provenance: Provenance
    methods: Dict[str, MethodSummary]


def check_output_dir(path) -> Path:
    """Create the directory if needed and make sure it is writable."""
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=out):
            pass
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc
    return out


def resolve_output_dir(cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get("LOTFAIR_OUTPUT_DIR") or cfg.output_dir)


def _fmt(v: float) -> str:
    return "%.17g" % v


def write_trace_csv(trace: Trace, path):
    cum = np.cumsum(trace.gaps)
    avg = np.cumsum(trace.costs) / np.arange(1, len(trace) + 1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for r, cg, ac in zip(trace.records, cum, avg):
            w.writerow([r.t, _fmt(r.cost), _fmt(r.gap), _fmt(r.lambda1), _fmt(r.lambda2), _fmt(cg), _fmt(ac)])


def summary_dict(result: RunResult) -> dict:
    methods = {}
    for name, res in result.methods.items():
        metrics = {k: (None if v is None else float(v)) for k, v in result.summaries[name].items()}
        methods[name] = {
            "status": "ok" if res.ok else "failed",
            "reason": res.error,
            "causal": res.causal,
            "metrics": metrics,
        }
    data = {"provenance": result.provenance, "methods": methods}
    SummaryFile.model_validate(data)
    return data


def emit_outputs(result: RunResult, output_dir) -> List[Path]:
    out = check_output_dir(output_dir)
    written = []
    for name, res in result.methods.items():
        if res.ok:
            path = out / f"trace_{name}.csv"
            write_trace_csv(res.trace, path)
            written.append(path)
    path = out / "summary.json"
    path.write_text(json.dumps(summary_dict(result), indent=2, sort_keys=True, allow_nan=False) + "\n")
    written.append(path)
    return written


def read_summary(path) -> SummaryFile:
    return SummaryFile.model_validate_json(Path(path).read_text())


def bounds_report(cfg: ExperimentConfig) -> dict:
    """Fairness and regret bounds for the configured constants and step sizes."""
    constants = bound_constants(cfg)
    if constants is None:
        raise ValueError("bound constants unavailable: set bounds.G, bounds.M, bounds.R, bounds.epsilon, "
                         "bounds.vbar_g (or use the cosine toy family)")
    alpha, mu = cfg.solver.alpha, cfg.solver.mu
    out = {
        "G": constants.G, "M": constants.M, "R": constants.R,
        "epsilon": constants.epsilon, "vbar_g": constants.vbar_g,
        "alpha": alpha, "mu": mu,
        "lambda_bar": lambda_bar(constants, alpha, mu),
        "fairness_bound": fairness_bound(constants, alpha, mu),
        "regret_bound": None,
    }
    variation = analytic_variation(cfg)
    if variation is not None:
        out["regret_bound"] = regret_bound(constants, alpha, mu, variation, cfg.horizon)
        out["v_xstar"] = variation.v_xstar
        out["v_gbar"] = variation.v_gbar
    return out
