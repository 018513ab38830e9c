"""Per-round problem oracles, solver configuration and trace containers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class LotFairError(Exception):
    """Base class for solver errors."""


class NonFiniteError(LotFairError, ValueError):
    """An oracle or iterate produced NaN/Inf."""


class VacuousBoundError(LotFairError, ValueError):
    """Interior margin does not exceed the constraint variation."""


class MissingComparatorError(LotFairError, KeyError):
    pass


def check_finite(value, what: str = "value"):
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite {what}: {value!r}")
    return value


def identity_projection(x: np.ndarray) -> np.ndarray:
    return np.array(x, dtype=float, copy=True)


def box_projection(lower, upper) -> Callable[[np.ndarray], np.ndarray]:
    lo = np.asarray(lower, dtype=float)
    hi = np.asarray(upper, dtype=float)
    if np.any(lo > hi):
        raise ValueError("empty box")

    def project(x):
        return np.clip(np.asarray(x, dtype=float), lo, hi)

    return project


@dataclass(frozen=True)
class RoundProblem:
    """Oracles describing a single time slot.

    ``cost_value_grad`` returns ``(f_t(x), grad f_t(x))``; ``gap_value`` and
    ``gap_grad`` evaluate the signed fairness gap ``g_t``; ``project`` is the
    Euclidean projector onto the round's feasible set. Oracles must be pure.

    Optional hooks let solvers exploit structure:

    * ``gap_affine`` -- ``g_t`` is affine, so the proximal subproblem has a
      closed-form solution.
    * ``cost_affine`` -- ``f_t`` is affine as well; with ``gap_affine`` any
      linear-plus-prox subproblem is a single projection.
    * ``project_capped(x, cap)`` -- projector onto the feasible set
      intersected with ``|g_t(x)| <= cap``.
    * ``sample_box`` -- ``(lower, upper)`` box used to draw feasible samples
      when estimating constraint variation.
    * ``sampler(rng, n)`` -- draws n feasible points directly (overrides
      ``sample_box``).
    """

    cost_value_grad: Callable[[np.ndarray], tuple]
    gap_value: Callable[[np.ndarray], float]
    gap_grad: Callable[[np.ndarray], np.ndarray]
    project: Callable[[np.ndarray], np.ndarray] = identity_projection
    t: int = 0
    dim: Optional[int] = None
    gap_affine: bool = False
    cost_affine: bool = False
    project_capped: Optional[Callable[[np.ndarray, float], np.ndarray]] = None
    sample_box: Optional[tuple] = None
    residual: Optional[Callable[[np.ndarray], float]] = None
    sampler: Optional[Callable] = None

    def cost(self, x) -> float:
        return float(self.cost_value_grad(x)[0])

    def feasible(self, x, tol: float = 1e-6) -> bool:
        if self.residual is not None:
            return self.residual(x) <= tol
        x = np.asarray(x, dtype=float)
        return float(np.linalg.norm(self.project(x) - x)) <= tol


def null_round(dim: int, project=identity_projection) -> RoundProblem:
    """A round with zero cost and zero gap; stands in for the absent round 0."""
    zero = np.zeros(dim)
    return RoundProblem(
        cost_value_grad=lambda x: (0.0, zero.copy()),
        gap_value=lambda x: 0.0,
        gap_grad=lambda x: zero.copy(),
        project=project,
        t=0,
        dim=dim,
        gap_affine=True,
    )


@dataclass(frozen=True)
class DualPair:
    lambda1: float = 0.0
    lambda2: float = 0.0

    def __post_init__(self):
        check_finite([self.lambda1, self.lambda2], "dual variable")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError(f"dual variables must be nonnegative: {self}")

    @property
    def net(self) -> float:
        """Coefficient multiplying g in the Lagrangian."""
        return self.lambda1 - self.lambda2


MU_SCHEDULES = ("constant", "inverse_cuberoot", "custom")


@dataclass(frozen=True)
class SolverConfig:
    alpha: float = 0.1
    mu: float = 0.1
    mu_schedule: str = "constant"
    mu_list: tuple = ()
    inner_max_iters: int = 500
    inner_tol: float = 1e-8
    feas_tol: float = 1e-6
    seed: int = 0
    outer_max_iters: int = 200
    coupling_tol: float = 1e-4

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.mu_schedule not in MU_SCHEDULES:
            raise ValueError(f"unknown mu_schedule {self.mu_schedule!r}")
        if self.mu_schedule == "custom":
            if not self.mu_list or any(not m > 0 for m in self.mu_list):
                raise ValueError("custom mu schedule needs a list of positive step sizes")
        elif not self.mu > 0:
            raise ValueError("mu must be positive")
        if self.inner_max_iters < 1 or self.outer_max_iters < 1:
            raise ValueError("iteration caps must be positive")
        if not (self.inner_tol > 0 and self.feas_tol > 0 and self.coupling_tol > 0):
            raise ValueError("tolerances must be positive")

    def mu_at(self, t: int) -> float:
        """Dual step size for round ``t`` (1-based)."""
        if self.mu_schedule == "constant":
            return self.mu
        if self.mu_schedule == "inverse_cuberoot":
            return self.mu * t ** (-1.0 / 3.0)
        if t - 1 < len(self.mu_list):
            return float(self.mu_list[t - 1])
        return float(self.mu_list[-1])


@dataclass(frozen=True)
class TraceRecord:
    t: int
    x: np.ndarray
    cost: float
    gap: float
    lambda1: float = 0.0
    lambda2: float = 0.0
    inner_iters: int = 0
    inner_residual: float = 0.0
    note: str = ""


@dataclass
class Trace:
    records: list = field(default_factory=list)
    comparator_costs_star: Optional[Sequence[float]] = None
    comparator_costs_off: Optional[Sequence[float]] = None
    method: str = ""
    causal: bool = True
    final_duals: Optional[DualPair] = None

    def __post_init__(self):
        for name in ("comparator_costs_star", "comparator_costs_off"):
            seq = getattr(self, name)
            if seq is not None and len(seq) != len(self.records):
                raise ValueError(f"{name} has length {len(seq)}, expected {len(self.records)}")

    def __len__(self):
        return len(self.records)

    def append(self, record: TraceRecord):
        expected = self.records[-1].t + 1 if self.records else record.t
        if record.t != expected:
            raise ValueError(f"trace rounds must be consecutive: got t={record.t}, expected {expected}")
        self.records.append(record)

    @property
    def costs(self) -> np.ndarray:
        return np.array([r.cost for r in self.records], dtype=float)

    @property
    def gaps(self) -> np.ndarray:
        return np.array([r.gap for r in self.records], dtype=float)

    @property
    def lambda1s(self) -> np.ndarray:
        return np.array([r.lambda1 for r in self.records], dtype=float)

    @property
    def lambda2s(self) -> np.ndarray:
        return np.array([r.lambda2 for r in self.records], dtype=float)

    @property
    def decisions(self) -> list:
        return [r.x for r in self.records]
