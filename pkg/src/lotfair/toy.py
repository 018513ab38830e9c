"""Small analytic problem families: quadratic costs, affine gaps, box sets.

These are the streams the bound checks run on, since every constant in the
bounds can be computed in closed form for them.
"""

from __future__ import annotations

import numpy as np

from .metrics import BoundConstants
from .problem import RoundProblem, box_projection


def quadratic_affine_round(t, weights, target, gap_coef, gap_offset, lower, upper) -> RoundProblem:
    """``f(x) = sum_i w_i (x_i - m_i)^2``, ``g(x) = a.x + b`` over the box ``[lower, upper]``."""
    w = np.atleast_1d(np.asarray(weights, dtype=float))
    m = np.atleast_1d(np.asarray(target, dtype=float))
    a = np.atleast_1d(np.asarray(gap_coef, dtype=float))
    b = float(gap_offset)
    lo = np.broadcast_to(np.asarray(lower, dtype=float), m.shape).copy()
    hi = np.broadcast_to(np.asarray(upper, dtype=float), m.shape).copy()

    def cost_value_grad(x):
        d = np.asarray(x, dtype=float) - m
        return float(np.sum(w * d * d)), 2 * w * d

    def gap_value(x):
        return float(a @ np.asarray(x, dtype=float) + b)

    def gap_grad(x):
        return a.copy()

    sample = (np.where(np.isfinite(lo), lo, -10.0), np.where(np.isfinite(hi), hi, 10.0))
    return RoundProblem(cost_value_grad, gap_value, gap_grad, box_projection(lo, hi), t=t, dim=m.size,
                        gap_affine=True, sample_box=sample)


def cosine_centers(T, center=0.5, amplitude=0.05, frequency=1.0):
    t = np.arange(1, T + 1, dtype=float)
    return center + amplitude * np.cos(frequency * t)


def cosine_stream(T, target=1.0, center=0.5, amplitude=0.05, frequency=1.0, lower=0.0, upper=1.0):
    """Stationary 1-D quadratic with gap ``x - c_t`` and ``c_t = center + amplitude cos(frequency t)``."""
    cs = cosine_centers(T, center, amplitude, frequency)
    return [quadratic_affine_round(t, 1.0, target, 1.0, -c, lower, upper) for t, c in enumerate(cs, start=1)]


def cosine_constants(T, target=1.0, center=0.5, amplitude=0.05, frequency=1.0, lower=0.0, upper=1.0) -> BoundConstants:
    """Exact bound constants for :func:`cosine_stream` over its horizon."""
    cs = cosine_centers(T, center, amplitude, frequency)
    G = 2 * max(abs(lower - target), abs(upper - target))
    M = max(abs(lower - cs.min()), abs(upper - cs.max()), abs(upper - cs.min()), abs(lower - cs.max()))
    R = upper - lower
    eps = float(min(np.min(cs - lower), np.min(upper - cs)))
    vbar = float(np.max(np.abs(np.diff(cs)))) if T > 1 else 0.0
    return BoundConstants(G=float(G), M=float(M), R=float(R), epsilon=eps, vbar_g=vbar)


def cosine_star(T, center=0.5, amplitude=0.05, frequency=1.0):
    """Per-round fair minimizers of :func:`cosine_stream` (the gap pins x = c_t)."""
    return [np.array([c]) for c in cosine_centers(T, center, amplitude, frequency)]


def pinned_gap_stream(T, target=1.0, center=0.5, lower=0.0, upper=1.0):
    """Stream ``f = (x - target)^2``, ``g = x - center`` with ``target > center``.

    Under the per-round constraint ``g^2 <= kappa`` the minimizer sits on the
    upper edge, so every round ends with ``g = +sqrt(kappa)``.
    """
    return [quadratic_affine_round(t, 1.0, target, 1.0, -center, lower, upper) for t in range(1, T + 1)]
