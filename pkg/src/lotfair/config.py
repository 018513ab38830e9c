"""Experiment configuration: flat ``key = value`` text with dotted namespaces.

Example::

    app = toy
    horizon = 200
    seed = 0
    baselines = sgd, instantaneous, offline, star
    solver.alpha = 0.1
    solver.mu = 0.1
    toy.amplitude = 0.05

Blank lines and ``#`` comments are ignored. Unknown keys, repeated keys and
ill-typed values are rejected.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .problem import SolverConfig

BASELINES = ("sgd", "instantaneous", "offline", "star")


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SolverSection(_Strict):
    alpha: float = Field(0.1, gt=0)
    mu: float = Field(0.1, gt=0)
    mu_schedule: Literal["constant", "inverse_cuberoot", "custom"] = "constant"
    mu_list: List[float] = []
    inner_max_iters: int = Field(500, ge=1)
    inner_tol: float = Field(1e-8, gt=0)
    feas_tol: float = Field(1e-6, gt=0)
    outer_max_iters: int = Field(200, ge=1)
    coupling_tol: float = Field(1e-4, gt=0)

    @field_validator("mu_list", mode="before")
    @classmethod
    def _split(cls, v):
        return _split_list(v)


class ToySection(_Strict):
    family: Literal["cosine", "pinned"] = "cosine"
    target: float = 1.0
    center: float = 0.5
    amplitude: float = 0.05
    frequency: float = 1.0
    lower: float = 0.0
    upper: float = 1.0
    kappa: float = Field(0.0016, ge=0)
    tau: Optional[float] = None

    @model_validator(mode="after")
    def _box(self):
        if not self.lower < self.upper:
            raise ValueError("toy.lower must be below toy.upper")
        return self


class ClassifySection(_Strict):
    source: Literal["synthetic", "adult"] = "synthetic"
    path: Optional[str] = None
    batch_size: int = Field(50, ge=2)
    sensitive_attr: Literal["sex", "race"] = "sex"
    kappa: float = Field(0.0016, ge=0)
    tau: Optional[float] = None
    n_features: int = Field(5, ge=1)
    bias_strength: float = 1.0
    radius: float = Field(10.0, gt=0)
    reduction: Literal["sum", "mean"] = "sum"

    @model_validator(mode="after")
    def _path(self):
        if self.source == "adult" and not self.path:
            raise ValueError("classify.path is required for the adult source")
        return self


class P2PSection(_Strict):
    setting: Literal["random", "timevarying", "oasis"] = "timevarying"
    grid: Optional[str] = None
    line_limit: Optional[float] = Field(1.0, gt=0)
    kappa: float = Field(0.0016, ge=0)
    tau: Optional[float] = None
    gamma: float = Field(0.01, ge=0)
    utility_price: float = Field(1.0, gt=0)
    frac: float = Field(0.15, gt=0, le=1)
    path: Optional[str] = None
    dirichlet_conc: float = Field(1.0, gt=0)
    scale: float = Field(1.0, gt=0)
    denominator: Literal["group", "consumers"] = "group"
    noise_std: float = Field(0.05, ge=0)
    frequency: float = math.pi

    @model_validator(mode="after")
    def _check(self):
        if self.setting == "oasis" and not self.path:
            raise ValueError("p2p.path is required for the oasis setting")
        if self.tau is not None and not self.tau > self.kappa:
            raise ValueError("p2p.tau must exceed p2p.kappa")
        return self


class BoundsSection(_Strict):
    G: Optional[float] = Field(None, gt=0)
    M: Optional[float] = Field(None, gt=0)
    R: Optional[float] = Field(None, gt=0)
    epsilon: Optional[float] = Field(None, gt=0)
    vbar_g: Optional[float] = Field(None, ge=0)
    v_xstar: Optional[float] = Field(None, ge=0)
    v_gbar: Optional[float] = Field(None, ge=0)


class MetricsSection(_Strict):
    n_var_samples: int = Field(1024, ge=1)


class ExperimentConfig(_Strict):
    app: Literal["toy", "classify", "p2p"]
    horizon: int = Field(ge=1)
    seed: int = 0
    output_dir: str = "results"
    baselines: List[Literal["sgd", "instantaneous", "offline", "star"]] = []
    solver: SolverSection = SolverSection()
    toy: ToySection = ToySection()
    classify: ClassifySection = ClassifySection()
    p2p: P2PSection = P2PSection()
    bounds: BoundsSection = BoundsSection()
    metrics: MetricsSection = MetricsSection()

    @field_validator("baselines", mode="before")
    @classmethod
    def _split(cls, v):
        items = _split_list(v)
        if len(set(items)) != len(items):
            raise ValueError("baselines listed twice")
        return items

    def solver_config(self) -> SolverConfig:
        s = self.solver
        return SolverConfig(alpha=s.alpha, mu=s.mu, mu_schedule=s.mu_schedule, mu_list=tuple(s.mu_list),
                            inner_max_iters=s.inner_max_iters, inner_tol=s.inner_tol, feas_tol=s.feas_tol,
                            seed=self.seed, outer_max_iters=s.outer_max_iters, coupling_tol=s.coupling_tol)

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form, excluding the output location."""
        data = self.model_dump(mode="json")
        data.pop("output_dir")
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _split_list(v):
    if isinstance(v, str):
        return [item.strip() for item in v.split(",") if item.strip()]
    return v


def parse_config_text(text: str) -> ExperimentConfig:
    tree: dict = {}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        parts = key.split(".")
        if len(parts) > 2:
            raise ConfigError(f"line {lineno}: key {key!r} is nested too deeply")
        node = tree
        if len(parts) == 2:
            node = tree.setdefault(parts[0], {})
            if not isinstance(node, dict):
                raise ConfigError(f"line {lineno}: {parts[0]!r} is not a section")
        elif isinstance(tree.get(key), dict):
            raise ConfigError(f"line {lineno}: {key!r} is a section")
        node[parts[-1]] = value
    try:
        return ExperimentConfig.model_validate(tree)
    except ValidationError as exc:
        raise ConfigError(_describe(exc)) from exc


def _describe(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"] if not isinstance(p, int)) or "config"
        lines.append(f"{loc}: {err['msg']}")
    return "invalid config: " + "; ".join(lines)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)
