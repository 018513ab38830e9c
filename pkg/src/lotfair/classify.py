"""Online logistic classification with a demographic-parity gap.

The decision vector is a logistic-regression weight vector. Each round
sees a batch of individuals from two groups; the cost is the batch
cross-entropy and the gap is the difference of the groups' average
positive-prediction probabilities.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .problem import RoundProblem

log = logging.getLogger(__name__)

P_EPS = 1e-12

# Attribute columns of the Adult census file, in file order, then the label.
ADULT_NUMERIC = ["age", "fnlwgt", "education-num", "capital-gain", "capital-loss", "hours-per-week"]
ADULT_CATEGORICAL = ["workclass", "education", "marital-status", "occupation", "relationship", "race", "sex",
                     "native-country"]
ADULT_COLUMNS = ["age", "workclass", "fnlwgt", "education", "education-num", "marital-status", "occupation",
                 "relationship", "race", "sex", "capital-gain", "capital-loss", "hours-per-week", "native-country",
                 "income"]
# value mapped to group 0 for each supported sensitive attribute
ADULT_GROUP0 = {"sex": "Female", "race": "Black"}
FIT_FRACTION = 0.6

# synthetic stream: group shift per unit bias, and label-model weight per feature
SHIFT_SCALE = 1.5
TRUTH_WEIGHT = 0.4


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    label: int
    group: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        if self.label not in (-1, 1):
            raise ValueError(f"label must be -1 or +1, got {self.label}")
        if self.group not in (0, 1):
            raise ValueError(f"group must be 0 or 1, got {self.group}")


class Batch:
    """The individuals of one round, stored column-wise."""

    def __init__(self, features, labels, groups, t: int = 0):
        self.features = np.asarray(features, dtype=float)
        self.labels = np.asarray(labels, dtype=int)
        self.groups = np.asarray(groups, dtype=int)
        self.t = t
        if self.features.ndim != 2 or len(self.features) == 0:
            raise ValueError("batch needs a nonempty 2-D feature array")
        if not (len(self.labels) == len(self.groups) == len(self.features)):
            raise ValueError("features, labels and groups must have equal length")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        if not np.all(np.isin(self.labels, (-1, 1))):
            raise ValueError("labels must be -1 or +1")
        if not np.all(np.isin(self.groups, (0, 1))):
            raise ValueError("groups must be 0 or 1")

    @classmethod
    def from_samples(cls, samples, t: int = 0) -> "Batch":
        return cls([s.features for s in samples], [s.label for s in samples], [s.group for s in samples], t)

    @property
    def samples(self):
        return [Sample(f, int(y), int(z)) for f, y, z in zip(self.features, self.labels, self.groups)]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return len(self.labels)

    def has_both_groups(self) -> bool:
        return bool(np.any(self.groups == 0) and np.any(self.groups == 1))


def _check_dim(x, d):
    if np.shape(x)[-1] != np.shape(d)[-1]:
        raise ValueError(f"dimension mismatch: weights {np.shape(x)} vs features {np.shape(d)}")


def _sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def predict_prob(x, d):
    """Logistic probability of a positive label, clamped to ``[P_EPS, 1 - P_EPS]``.

    ``d`` may be one feature vector or a matrix with one row per individual.
    """
    x = np.asarray(x, dtype=float)
    d = np.asarray(d, dtype=float)
    _check_dim(x, d)
    p = np.clip(_sigmoid(d @ x), P_EPS, 1 - P_EPS)
    return float(p) if p.ndim == 0 else p


def cross_entropy(x, batch: Batch, reduction: str = "sum"):
    """Batch cross-entropy and its gradient; ``reduction`` is ``"sum"`` or ``"mean"``."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    x = np.asarray(x, dtype=float)
    _check_dim(x, batch.features)
    p = predict_prob(x, batch.features)
    pos = (batch.labels + 1) / 2
    value = -float(np.sum(pos * np.log(p) + (1 - pos) * np.log(1 - p)))
    # unclamped residual keeps the gradient exact away from saturation
    grad = batch.features.T @ (_sigmoid(batch.features @ x) - pos)
    if reduction == "mean":
        return value / len(batch), grad / len(batch)
    if reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return value, grad


def _group_masks(batch: Batch):
    m0 = batch.groups == 0
    m1 = ~m0
    if not m0.any() or not m1.any():
        raise ValueError(f"round {batch.t}: both groups must be present for the parity gap")
    return m0, m1


def dp_gap(x, batch: Batch):
    """Group-0 minus group-1 average positive probability, and its gradient."""
    x = np.asarray(x, dtype=float)
    _check_dim(x, batch.features)
    m0, m1 = _group_masks(batch)
    p = _sigmoid(batch.features @ x)
    value = float(p[m0].mean() - p[m1].mean())
    slope = (p * (1 - p))[:, None] * batch.features
    grad = slope[m0].mean(axis=0) - slope[m1].mean(axis=0)
    return value, grad


def squared_dp_constraint(x, batch: Batch, kappa: float) -> float:
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    return dp_gap(x, batch)[0] ** 2 - kappa


def ball_projection(radius: float):
    """Projector onto the Euclidean ball of the given radius (identity when infinite)."""
    def project(x):
        x = np.array(x, dtype=float, copy=True)
        nrm = np.linalg.norm(x)
        if nrm > radius:
            x *= radius / nrm
        return x

    return project


def classify_round(batch: Batch, radius: float = 10.0, reduction: str = "sum") -> RoundProblem:
    """Round oracles for one batch; the decision set is a ball of weight vectors."""
    dim = batch.n_features
    lo = -radius / np.sqrt(dim) * np.ones(dim)
    return RoundProblem(
        cost_value_grad=lambda x: cross_entropy(x, batch, reduction),
        gap_value=lambda x: dp_gap(x, batch)[0],
        gap_grad=lambda x: dp_gap(x, batch)[1],
        project=ball_projection(radius),
        t=batch.t,
        dim=dim,
        sample_box=(lo, -lo),
    )


def synthetic_biased_stream(T: int, n_features: int = 5, bias_strength: float = 1.0, seed: int = 0,
                            batch_size: int = 50) -> Iterator[Batch]:
    """Lazily generate batches whose groups differ in feature means.

    Features are standard normal; group 1 is shifted by ``SHIFT_SCALE *
    bias_strength`` along the first feature. Labels come from a fixed logistic
    model with equal weights ``TRUTH_WEIGHT`` on all features. An intercept
    column is appended. Round ``t`` is drawn from its own generator seeded by
    ``(seed, t)``.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2 so both groups fit")
    truth = ground_truth_weights(n_features)
    for t in range(1, T + 1):
        yield _synthetic_batch(np.random.default_rng([seed, t]), truth, n_features, bias_strength, batch_size, t)


def ground_truth_weights(n_features: int) -> np.ndarray:
    """Label model of :func:`synthetic_biased_stream` (last entry is the intercept)."""
    return np.concatenate([TRUTH_WEIGHT * np.ones(n_features), [0.0]])


def _synthetic_batch(rng, truth, n_features, bias_strength, n, t):
    groups = rng.integers(0, 2, size=n)
    groups[0], groups[1] = 0, 1  # both groups present
    feats = rng.standard_normal((n, n_features))
    feats[:, 0] += SHIFT_SCALE * bias_strength * groups
    feats = np.hstack([feats, np.ones((n, 1))])
    labels = np.where(rng.uniform(size=n) < _sigmoid(feats @ truth), 1, -1)
    return Batch(feats, labels, groups, t)


def synthetic_sample(n: int, n_features: int = 5, bias_strength: float = 1.0, seed: int = 0) -> Batch:
    """One large batch from the same distribution, for Monte-Carlo checks."""
    rng = np.random.default_rng([seed, 0])
    return _synthetic_batch(rng, ground_truth_weights(n_features), n_features, bias_strength, n, 0)


def _read_adult(path):
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh, skipinitialspace=True)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        header = [h.strip() for h in header]
        rows, skipped = [], 0
        for row in reader:
            row = [c.strip() for c in row]
            if len(row) != len(header) or "?" in row or any(c == "" for c in row):
                skipped += 1
                continue
            rows.append(row)
    if skipped:
        log.warning("%s: skipped %d malformed rows", path, skipped)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return header, rows


def _encode_adult(header, rows, sensitive_attr):
    col = {name: header.index(name) for name in header}
    if sensitive_attr not in col:
        raise ValueError(f"sensitive column {sensitive_attr!r} missing")
    missing = [c for c in ADULT_COLUMNS if c not in col]
    if missing:
        raise ValueError(f"missing columns: {missing}")
    n_fit = max(1, int(FIT_FRACTION * len(rows)))
    blocks = []
    for name in ADULT_NUMERIC:
        try:
            v = np.array([float(r[col[name]]) for r in rows])
        except ValueError as exc:
            raise ValueError(f"non-numeric value in column {name!r}") from exc
        mean, std = v[:n_fit].mean(), v[:n_fit].std()
        blocks.append(((v - mean) / (std if std > 0 else 1.0))[:, None])
    for name in ADULT_CATEGORICAL:
        if name == sensitive_attr:
            continue
        vals = [r[col[name]] for r in rows]
        levels = sorted(set(vals[:n_fit]))
        index = {v: k for k, v in enumerate(levels)}
        onehot = np.zeros((len(rows), len(levels)))
        for i, v in enumerate(vals):
            if v in index:  # levels unseen in the fit split encode as all zeros
                onehot[i, index[v]] = 1.0
        blocks.append(onehot)
    blocks.append(np.ones((len(rows), 1)))
    feats = np.hstack(blocks)
    labels = np.array([1 if r[col["income"]].rstrip(".") == ">50K" else -1 for r in rows])
    groups = np.array([0 if r[col[sensitive_attr]] == ADULT_GROUP0[sensitive_attr] else 1 for r in rows])
    return feats, labels, groups


def adult_ingest(path, batch_size: int = 50, sensitive_attr: str = "sex", seed: int = 0,
                 n_rounds: Optional[int] = None) -> Iterator[Batch]:
    """Shuffle the Adult file deterministically and cut it into rounds of ``batch_size``.

    The sensitive attribute defines the groups and is not used as a feature.
    A batch missing a group swaps in the nearest later individual of that
    group; the file must contain both groups.
    """
    if sensitive_attr not in ADULT_GROUP0:
        raise ValueError(f"unsupported sensitive attribute {sensitive_attr!r}")
    header, rows = _read_adult(path)
    if sensitive_attr not in header:
        raise ValueError(f"sensitive column {sensitive_attr!r} missing")
    feats, labels, groups = _encode_adult(header, rows, sensitive_attr)
    if np.all(groups == groups[0]):
        raise ValueError("only one group present in the file")
    order = np.random.default_rng(seed).permutation(len(rows))
    total = len(order) // batch_size
    if n_rounds is not None:
        total = min(total, n_rounds)
    return _adult_batches(feats, labels, groups, order, batch_size, total)


def _adult_batches(feats, labels, groups, order, n, total):
    order = order.copy()
    for t in range(1, total + 1):
        idx = order[(t - 1) * n: t * n]
        for g in (0, 1):
            if not np.any(groups[idx] == g):
                later = np.nonzero(groups[order[t * n:]] == g)[0]
                earlier = np.nonzero(groups[order[:(t - 1) * n]] == g)[0]
                pos = t * n + later[0] if later.size else earlier[-1]
                order[t * n - 1], order[pos] = order[pos], order[t * n - 1]
                idx = order[(t - 1) * n: t * n]
        yield Batch(feats[idx], labels[idx], groups[idx], t)
