"""Peer-to-peer electricity market rounds: cost, satisfaction gap, feasible set, generators.

A trade matrix ``X`` has ``X[i, j] > 0`` when node i sells to node j. Nodes
with nonnegative surplus are producers, the rest consumers. On the feasible
set only producer-to-consumer entries are free, so projections and linear
programs work in the reduced variable ``Y[p, c] = X[producer p, consumer c]``
with ``X[c, p] = -Y[p, c]``.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from ..problem import RoundProblem
from ._dykstra import dykstra
from .grid import GridModel, line_flows

log = logging.getLogger(__name__)

DEFAULT_KAPPA = 0.0016
DEFAULT_TAU = 10 * DEFAULT_KAPPA
MAX_SWEEPS = 20000
FAIR_SLACK = 1e-6


@dataclass(frozen=True)
class MarketRound:
    surplus: np.ndarray
    demand: np.ndarray
    peer_prices: np.ndarray
    utility_price: float
    wheeling_rate: float
    t: int = 0

    def __post_init__(self):
        h = np.asarray(self.surplus, dtype=float)
        d = np.asarray(self.demand, dtype=float)
        e = np.asarray(self.peer_prices, dtype=float)
        n = h.size
        if d.shape != (n,) or e.shape != (n, n):
            raise ValueError("surplus, demand and peer prices have inconsistent shapes")
        if not (np.all(np.isfinite(h)) and np.all(np.isfinite(d)) and np.all(np.isfinite(e))):
            raise ValueError("market data must be finite")
        if np.any(d < 0):
            raise ValueError("demand must be nonnegative")
        if np.any(d[h < 0] <= 0):
            raise ValueError("every consumer needs positive demand")
        object.__setattr__(self, "surplus", h)
        object.__setattr__(self, "demand", d)
        object.__setattr__(self, "peer_prices", e)

    @property
    def n_nodes(self) -> int:
        return self.surplus.size

    @property
    def producers(self) -> np.ndarray:
        # zero-surplus nodes count as producers with nothing to sell
        return np.nonzero(self.surplus >= 0)[0]

    @property
    def consumers(self) -> np.ndarray:
        return np.nonzero(self.surplus < 0)[0]


def _as_matrix(X, n):
    X = np.asarray(X, dtype=float)
    if X.size != n * n:
        raise ValueError(f"trade matrix must have {n * n} entries")
    return X.reshape(n, n)


def market_cost(X, rnd: MarketRound, D):
    """Average consumer cost of a trade matrix and its (constant) gradient matrix."""
    n = rnd.n_nodes
    X = _as_matrix(X, n)
    D = np.asarray(D, dtype=float)
    cons = rnd.consumers
    grad = np.zeros((n, n))
    if cons.size == 0:
        warnings.warn(f"round {rnd.t}: no consumers, cost is 0", RuntimeWarning, stacklevel=2)
        return 0.0, grad
    p, gamma = rnd.utility_price, rnd.wheeling_rate
    Xc = X[cons]
    utility = (rnd.surplus[cons] - Xc.sum(axis=1)) * p
    peer = np.sum(rnd.peer_prices[cons] * Xc, axis=1)
    fee = gamma * np.sum(D[cons] * Xc)
    value = (-np.sum(utility + peer) - fee) / cons.size
    grad[cons] = (p - rnd.peer_prices[cons] - gamma * D[cons]) / cons.size
    return float(value), grad


def gap_weights(rnd: MarketRound, groups, denominator: str = "group") -> np.ndarray:
    """Per-node weight of the post-trade deficit ratio in the satisfaction gap.

    ``denominator="group"`` divides by the full group size; ``"consumers"``
    divides by the number of consumers of that group this round.
    """
    groups = np.asarray(groups, dtype=int)
    if groups.shape != (rnd.n_nodes,):
        raise ValueError("groups must have one entry per node")
    is_cons = rnd.surplus < 0
    w = np.zeros(rnd.n_nodes)
    for g, sign in ((0, 1.0), (1, -1.0)):
        members = groups == g
        if denominator == "group":
            size = members.sum()
        elif denominator == "consumers":
            size = (members & is_cons).sum()
        else:
            raise ValueError(f"unknown denominator {denominator!r}")
        sel = members & is_cons
        if size > 0:
            w[sel] = sign / (size * rnd.demand[sel])
    return w


def satisfaction_gap(X, rnd: MarketRound, groups, denominator: str = "group"):
    """Group-0 minus group-1 average post-trade deficit ratio, and its gradient matrix."""
    n = rnd.n_nodes
    X = _as_matrix(X, n)
    w = gap_weights(rnd, groups, denominator)
    deficit = rnd.surplus - X.sum(axis=1)
    grad = np.repeat(-w[:, None], n, axis=1)
    return float(w @ deficit), grad


# --- feasible set ------------------------------------------------------------


@dataclass
class ProjectionResult:
    X: np.ndarray
    residual: float  # worst violation of the physical constraints
    fair_violation: float  # excess of |g| over the fairness cap (0 if the cap was dropped)
    sweeps: int
    converged: bool
    fair_cap_dropped: bool


@dataclass
class TradeSpace:
    """Reduced coordinates and constraint data of one round's feasible set.

    The fairness cap ``|g| <= fair_cap`` is dropped for rounds where no
    physically feasible trade can meet it; this is detected when the
    alternating projection cannot bring the fairness slab within ``FAIR_SLACK``.
    """

    rnd: MarketRound
    grid: GridModel
    fair_cap: float = math.inf
    groups: Optional[np.ndarray] = None
    denominator: str = "group"
    max_sweeps: int = MAX_SWEEPS
    tol: float = 1e-10
    fair_cap_dropped: bool = field(init=False, default=False)
    _warm: Optional[tuple] = field(init=False, default=None, repr=False)

    def __post_init__(self):
        rnd = self.rnd
        if rnd.n_nodes != self.grid.n_nodes:
            raise ValueError("market and grid disagree on the number of nodes")
        if self.groups is None:
            self.groups = np.asarray(self.grid.groups)
        self.P = rnd.producers
        self.C = rnd.consumers
        h = rnd.surplus
        self.row_budget = h[self.P]
        self.col_budget = -h[self.C]
        self.U = np.minimum(self.row_budget[:, None], self.col_budget[None, :])
        phi = self.grid.isf
        self.line_coef = phi[:, self.P][:, :, None] - phi[:, self.C][:, None, :]
        self.limits = self.grid.limits
        w = gap_weights(rnd, self.groups, self.denominator)
        self.gap_coef = np.broadcast_to(w[self.C][None, :], self.U.shape).copy()
        self.gap0 = float(w @ h)
        if math.isfinite(self.fair_cap) and self.U.size == 0 and abs(self.gap0) > self.fair_cap:
            self.fair_cap_dropped = True

    @property
    def shape(self):
        return self.U.shape

    @property
    def active_cap(self) -> float:
        return math.inf if self.fair_cap_dropped else self.fair_cap

    def reduce(self, X) -> np.ndarray:
        X = _as_matrix(X, self.rnd.n_nodes)
        return 0.5 * (X[np.ix_(self.P, self.C)] - X[np.ix_(self.C, self.P)].T)

    def embed(self, Y) -> np.ndarray:
        n = self.rnd.n_nodes
        X = np.zeros((n, n))
        X[np.ix_(self.P, self.C)] = Y
        X[np.ix_(self.C, self.P)] = -Y.T
        return X

    def flows(self, Y) -> np.ndarray:
        return np.einsum("lpc,pc->l", self.line_coef, Y)

    def repair(self, Y) -> np.ndarray:
        """Clip to the boxes, then shrink toward zero until every budget and line limit holds."""
        Y = np.clip(Y, 0.0, self.U)
        theta = 1.0
        for used, cap in ((Y.sum(axis=1), self.row_budget), (Y.sum(axis=0), self.col_budget),
                          (np.abs(self.flows(Y)), self.limits)):
            big = used > cap
            if np.any(big):
                theta = min(theta, float(np.min(cap[big] / used[big])))
        return Y * theta

    def _violation(self, Y) -> float:
        worst = max(0.0, float(np.max(-Y, initial=0.0)), float(np.max(Y - self.U, initial=0.0)))
        worst = max(worst, float(np.max(Y.sum(axis=1) - self.row_budget, initial=0.0)))
        worst = max(worst, float(np.max(Y.sum(axis=0) - self.col_budget, initial=0.0)))
        worst = max(worst, float(np.max(np.abs(self.flows(Y)) - self.limits, initial=0.0)))
        cap = self.active_cap
        if math.isfinite(cap):
            worst = max(worst, abs(float(np.sum(self.gap_coef * Y)) + self.gap0) - cap)
        return worst

    def project_reduced(self, V):
        """Dykstra's alternating projection of reduced trades onto the feasible set.

        The correction terms of the last converged call warm start the next
        one; a warm start that fails to converge is retried cold.
        """
        if V.size == 0:
            return V.copy(), 0, True
        cap = self.active_cap
        n_slabs = self.limits.size + (1 if math.isfinite(cap) else 0)
        V = np.ascontiguousarray(V, dtype=float)
        starts = []
        if self._warm is not None and self._warm[2].size == n_slabs:
            starts.append(tuple(w.copy() for w in self._warm))
        starts.append((np.zeros(self.shape), np.zeros(self.shape), np.zeros(n_slabs)))
        total = 0
        for state in starts:
            Y, sweeps, ok = dykstra(V, self.U, self.row_budget, self.col_budget, self.line_coef, self.limits,
                                    self.gap_coef, self.gap0, cap, self.max_sweeps, self.tol, *state)
            total += int(sweeps)
            if ok:
                self._warm = state
                return Y, total, True
        self._warm = None
        return Y, total, False

    def _fair_excess(self, Y) -> float:
        return abs(float(np.sum(self.gap_coef * Y)) + self.gap0) - self.fair_cap

    def project(self, X) -> ProjectionResult:
        V = self.reduce(X)
        Y, sweeps, ok = self.project_reduced(V)
        # the last Dykstra block is the fairness slab, so judge the cap on the repaired point
        if (not ok and not self.fair_cap_dropped and math.isfinite(self.fair_cap)
                and self._fair_excess(self.repair(Y)) > FAIR_SLACK):
            log.info("round %d: fairness cap %.3g unreachable, using the physical constraints only",
                     self.rnd.t, self.fair_cap)
            self.fair_cap_dropped = True
            Y, more, ok = self.project_reduced(V)
            sweeps += more
        if not ok:
            log.debug("round %d: projection stopped after %d sweeps", self.rnd.t, sweeps)
        Y = self.repair(Y)
        X_out = self.embed(Y)
        g = float(np.sum(self.gap_coef * Y)) + self.gap0
        fair = max(abs(g) - self.active_cap, 0.0) if math.isfinite(self.active_cap) else 0.0
        return ProjectionResult(X_out, constraint_residual(X_out, self.rnd, self.grid), fair, sweeps, ok,
                                self.fair_cap_dropped)

    def sample(self, rng, n):
        """Feasible samples: uniform in the boxes, scaled by a uniform factor, then repaired."""
        out = []
        for _ in range(n):
            Y = rng.uniform(0.0, 1.0, size=self.shape) * self.U * rng.uniform()
            out.append(self.embed(self.repair(Y)).ravel())
        return out


def constraint_residual(X, rnd: MarketRound, grid: GridModel) -> float:
    """Worst violation of the sign, budget, antisymmetry and line-limit constraints."""
    n = rnd.n_nodes
    X = _as_matrix(X, n)
    h = rnd.surplus
    prod = h >= 0
    hp = h[prod][:, None]
    hc = h[~prod][:, None]
    worst = float(np.max(np.abs(X + X.T)))
    Xp, Xc = X[prod], X[~prod]
    if Xp.size:
        worst = max(worst, float(np.max(-Xp)), float(np.max(Xp - hp)))
        rs = Xp.sum(axis=1)
        worst = max(worst, float(np.max(-rs)), float(np.max(rs - h[prod])))
    if Xc.size:
        worst = max(worst, float(np.max(Xc)), float(np.max(hc - Xc)))
        rs = Xc.sum(axis=1)
        worst = max(worst, float(np.max(rs)), float(np.max(h[~prod] - rs)))
    flows = line_flows(X, grid, h)
    worst = max(worst, float(np.max(np.abs(flows) - grid.limits)))
    return max(worst, 0.0)


def feasible_project(X, rnd: MarketRound, grid: GridModel, kappa: float = DEFAULT_KAPPA, tau: float = DEFAULT_TAU,
                     groups=None, max_sweeps: int = MAX_SWEEPS, tol: float = 1e-10) -> np.ndarray:
    """Nearest trade matrix satisfying the market constraints including the relaxed fairness cap."""
    if not tau > kappa >= 0:
        raise ValueError("need tau > kappa >= 0")
    space = TradeSpace(rnd, grid, math.sqrt(kappa + tau), groups, max_sweeps=max_sweeps, tol=tol)
    res = space.project(X)
    if not res.converged:
        log.warning("round %d: projection did not converge (residual %.3g)", rnd.t, res.residual)
    return res.X


def market_problem(rnd: MarketRound, grid: GridModel, kappa: float = DEFAULT_KAPPA, tau: float = DEFAULT_TAU,
                   groups=None, denominator: str = "group", max_sweeps: int = MAX_SWEEPS) -> RoundProblem:
    """Round oracles over flattened trade matrices."""
    if not tau > kappa >= 0:
        raise ValueError("need tau > kappa >= 0")
    groups = np.asarray(grid.groups if groups is None else groups, dtype=int)
    space = TradeSpace(rnd, grid, math.sqrt(kappa + tau), groups, denominator, max_sweeps)
    D = grid.distance
    n = rnd.n_nodes

    def cost_value_grad(x):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            v, g = market_cost(x, rnd, D)
        return v, g.ravel()

    def gap_value(x):
        return satisfaction_gap(x, rnd, groups, denominator)[0]

    def gap_grad(x):
        return satisfaction_gap(x, rnd, groups, denominator)[1].ravel()

    def project(x):
        return space.project(x).X.ravel()

    capped = {}

    def project_capped(x, cap):
        if cap not in capped:
            capped[cap] = TradeSpace(rnd, grid, cap, groups, denominator, max_sweeps)
        return capped[cap].project(x).X.ravel()

    return RoundProblem(
        cost_value_grad=cost_value_grad,
        gap_value=gap_value,
        gap_grad=gap_grad,
        project=project,
        t=rnd.t,
        dim=n * n,
        gap_affine=True,
        cost_affine=True,
        project_capped=project_capped,
        residual=lambda x: constraint_residual(x, rnd, grid),
        sampler=space.sample,
    )


# --- round generators ----------------------------------------------------------


@dataclass(frozen=True)
class MarketParams:
    """Free parameters of the synthetic market settings.

    Per-node cosine constants may be given explicitly (scalar or one value
    per node); when left as None they are drawn once from the seed.
    """

    utility_price: float = 1.0
    wheeling_rate: float = 0.01
    peer_price_ratio: float = 0.8
    intra_discount: float = 0.1
    price_spread: float = 0.05
    # random setting
    solar_mean: float = 1.0
    solar_std: float = 0.5
    wind_low: float = 0.0
    wind_high: float = 1.0
    demand_mean: float = 1.5
    demand_std: float = 0.5
    demand_min: float = 0.1
    # time-varying setting
    supply_offset: object = None
    supply_amplitude: object = None
    demand_offset: object = None
    demand_amplitude: object = None
    noise_std: float = 0.05
    frequency: float = math.pi

    def __post_init__(self):
        for name in ("utility_price", "peer_price_ratio", "demand_min"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("wheeling_rate", "intra_discount", "price_spread", "solar_std", "demand_std", "noise_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.wind_low > self.wind_high:
            raise ValueError("wind_low must not exceed wind_high")


def peer_prices(params: MarketParams, groups, rng) -> np.ndarray:
    """Peer price matrix; trades within a group are discounted by ``intra_discount``."""
    groups = np.asarray(groups)
    n = groups.size
    base = params.utility_price * params.peer_price_ratio
    e = base * (1.0 + params.price_spread * rng.uniform(-1.0, 1.0, size=(n, n)))
    same = groups[:, None] == groups[None, :]
    return np.where(same, e * (1.0 - params.intra_discount), e)


def gen_random_round(params: MarketParams, seed: int, t: int, groups) -> MarketRound:
    """Random setting: normal solar plus uniform wind supply, normal demand."""
    n = len(groups)
    rng = np.random.default_rng([seed, t])
    solar = np.maximum(0.0, rng.normal(params.solar_mean, params.solar_std, size=n))
    wind = rng.uniform(params.wind_low, params.wind_high, size=n)
    demand = np.maximum(params.demand_min, rng.normal(params.demand_mean, params.demand_std, size=n))
    supply = solar + wind
    return MarketRound(supply - demand, demand, peer_prices(params, groups, rng), params.utility_price,
                       params.wheeling_rate, t)


def _node_values(value, n, draw):
    if value is None:
        return draw()
    arr = np.broadcast_to(np.asarray(value, dtype=float), (n,)).copy()
    return arr


def timevarying_constants(params: MarketParams, seed: int, n: int):
    """Per-node cosine offsets and amplitudes for supply and demand."""
    rng = np.random.default_rng([seed, 0])
    s_amp = _node_values(params.supply_amplitude, n, lambda: rng.uniform(-0.5, 0.5, size=n))
    s_off = _node_values(params.supply_offset, n, lambda: np.abs(s_amp) + rng.uniform(0.3, 2.0, size=n))
    d_amp = _node_values(params.demand_amplitude, n, lambda: rng.uniform(-0.5, 0.5, size=n))
    d_off = _node_values(params.demand_offset, n, lambda: np.abs(d_amp) + rng.uniform(0.5, 2.0, size=n))
    return s_off, s_amp, d_off, d_amp


def gen_timevarying_round(params: MarketParams, seed: int, t: int, groups) -> MarketRound:
    """Time-varying setting: ``offset + amplitude cos(frequency t) + noise`` for supply and demand."""
    n = len(groups)
    s_off, s_amp, d_off, d_amp = timevarying_constants(params, seed, n)
    rng = np.random.default_rng([seed, t])
    wave = math.cos(params.frequency * t)
    supply = np.maximum(0.0, s_off + s_amp * wave + rng.normal(0.0, params.noise_std, size=n))
    demand = np.maximum(params.demand_min, d_off + d_amp * wave + rng.normal(0.0, params.noise_std, size=n))
    return MarketRound(supply - demand, demand, peer_prices(params, groups, rng), params.utility_price,
                       params.wheeling_rate, t)


OASIS_COLUMNS = ("timestamp", "total_demand", "solar_supply", "wind_supply", "price")


def oasis_ingest(path, groups, frac: float = 0.15, dirichlet_conc: float = 1.0, seed: int = 0,
                 params: Optional[MarketParams] = None, scale: float = 1.0):
    """Hourly system totals allocated to nodes with Dirichlet weights.

    Demand is scaled by ``frac``; demand, solar and wind each get their own
    weight vector per hour. The file's price becomes the utility price and
    ``scale`` divides every energy quantity.
    """
    if not 0 < frac <= 1 or not dirichlet_conc > 0 or not scale > 0:
        raise ValueError("need 0 < frac <= 1, dirichlet_conc > 0 and scale > 0")
    params = params or MarketParams()
    n = len(groups)
    rows, skipped = [], 0
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(c not in reader.fieldnames for c in OASIS_COLUMNS):
            raise ValueError(f"{path}: expected columns {OASIS_COLUMNS}")
        for row in reader:
            try:
                vals = [float(row[c]) for c in OASIS_COLUMNS[1:]]
            except (TypeError, ValueError):
                skipped += 1
                continue
            if not all(math.isfinite(v) and v >= 0 for v in vals) or vals[3] <= 0:
                skipped += 1
                continue
            rows.append(vals)
    if skipped:
        log.warning("%s: skipped %d malformed rows", path, skipped)
    if len(rows) < 2:
        raise ValueError(f"{path}: need at least two valid rows")
    out = []
    for t, (demand, solar, wind, price) in enumerate(rows, start=1):
        rng = np.random.default_rng([seed, t])
        wd, ws, ww = (rng.dirichlet(np.full(n, dirichlet_conc)) for _ in range(3))
        d = np.maximum(wd * demand * frac / scale, 0.0)
        s = (ws * solar + ww * wind) / scale
        p_round = replace(params, utility_price=price)
        out.append(MarketRound(s - d, d, peer_prices(p_round, groups, rng), price, params.wheeling_rate, t))
    return out
