import numpy as np
import pytest

from lotfair.problem import RoundProblem, box_projection, identity_projection


def grid_argmin(fn, lo, hi, step):
    """Dense 1-D grid search; returns the best grid point."""
    xs = np.arange(lo, hi + step / 2, step)
    vals = np.array([fn(x) for x in xs])
    return float(xs[np.argmin(vals)])


def grid_argmin_vec(fn_vec, lo, hi, step):
    """Vectorized 1-D grid search (``fn_vec`` maps an array of points to values)."""
    xs = np.arange(lo, hi + step / 2, step)
    return float(xs[np.argmin(fn_vec(xs))])


def grid_argmin_2d(fn_vec, lo, hi, n=801, refine=3):
    """2-D grid search with successive zoom; ``fn_vec(X, Y)`` is evaluated on meshes."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    for _ in range(refine):
        xs = np.linspace(lo[0], hi[0], n)
        ys = np.linspace(lo[1], hi[1], n)
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        V = fn_vec(X, Y)
        i, j = np.unravel_index(np.argmin(V), V.shape)
        best = np.array([xs[i], ys[j]])
        span = (hi - lo) / n * 8
        lo, hi = np.maximum(lo, best - span), np.minimum(hi, best + span)
    return best


def quadratic_round(w, m, a, b, lower=None, upper=None, t=1):
    """``f = sum w (x - m)^2``, ``g = a.x + b`` over a box (or all of R^n)."""
    w, m, a = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (w, m, a))
    project = identity_projection if lower is None else box_projection(lower, upper)
    return RoundProblem(
        cost_value_grad=lambda x: (float(np.sum(w * (x - m) ** 2)), 2 * w * (x - m)),
        gap_value=lambda x: float(a @ x + b),
        gap_grad=lambda x: a.copy(),
        project=project,
        t=t,
        dim=m.size,
        gap_affine=True,
    )


def central_diff(fn, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g


def assert_grad_close(analytic, numeric, rel=1e-4, abs_floor=1e-8):
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    scale = max(np.max(np.abs(numeric)), abs_floor)
    assert np.max(np.abs(analytic - numeric)) <= rel * scale, (analytic, numeric)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
