"""Compiled Dykstra kernel for the reduced trade polytope."""

import numpy as np
from numba import njit


@njit(cache=True)
def _capped_simplex(v, u, budget, out):
    # project v onto {0 <= y <= u, sum(y) <= budget}
    k = v.size
    total = 0.0
    for i in range(k):
        out[i] = min(max(v[i], 0.0), u[i])
        total += out[i]
    if total <= budget:
        return
    bp = np.empty(2 * k)
    for i in range(k):
        bp[i] = v[i] - u[i]
        bp[k + i] = v[i]
    bp.sort()
    prev_t = bp[0]
    prev_s = 0.0
    for i in range(k):
        prev_s += min(max(v[i] - prev_t, 0.0), u[i])
    theta = bp[-1]
    for j in range(1, 2 * k):
        t = bp[j]
        s = 0.0
        for i in range(k):
            s += min(max(v[i] - t, 0.0), u[i])
        if s <= budget:
            if prev_s > s:
                theta = prev_t + (prev_s - budget) / (prev_s - s) * (t - prev_t)
            else:
                theta = t
            break
        prev_t, prev_s = t, s
    for i in range(k):
        out[i] = min(max(v[i] - theta, 0.0), u[i])


@njit(cache=True)
def _violation(Y, U, rowb, colb, coef, limits, gap_coef, gap0, cap):
    P, C = Y.shape
    worst = 0.0
    for p in range(P):
        s = 0.0
        for c in range(C):
            worst = max(worst, -Y[p, c], Y[p, c] - U[p, c])
            s += Y[p, c]
        worst = max(worst, s - rowb[p])
    for c in range(C):
        s = 0.0
        for p in range(P):
            s += Y[p, c]
        worst = max(worst, s - colb[c])
    for l in range(limits.size):
        worst = max(worst, abs(np.sum(coef[l] * Y)) - limits[l])
    if np.isfinite(cap):
        worst = max(worst, abs(np.sum(gap_coef * Y) + gap0) - cap)
    return worst


@njit(cache=True)
def dykstra(V, U, rowb, colb, coef, limits, gap_coef, gap0, cap, max_sweeps, tol, inc_row, inc_col, inc_slab):
    """Dykstra's projection onto rows, columns, line slabs and the fairness slab.

    ``inc_row``, ``inc_col`` and ``inc_slab`` hold the correction terms; they
    are updated in place, and passing the ones left by a previous call warm
    starts the iteration (zeros give the textbook cold start). Returns
    ``(Y, sweeps, converged)``.
    """
    P, C = V.shape
    L = limits.size
    fair = np.isfinite(cap)
    nb = L + (1 if fair else 0)
    A = np.empty((nb, P, C))
    bounds = np.empty(nb)
    offsets = np.zeros(nb)
    for l in range(L):
        A[l] = coef[l]
        bounds[l] = limits[l]
    if fair:
        A[L] = gap_coef
        bounds[L] = cap
        offsets[L] = gap0
    norms = np.empty(nb)
    for b in range(nb):
        norms[b] = np.sum(A[b] * A[b])
    # slab increments are multiples of the slab normal: only the scalar is kept
    Y = V - inc_row - inc_col
    for b in range(nb):
        Y -= inc_slab[b] * A[b]
    W = np.empty((P, C))
    rbuf = np.empty(C)
    cbuf = np.empty(P)
    cin = np.empty(P)
    cu = np.empty(P)
    for sweep in range(1, max_sweeps + 1):
        change = 0.0
        for p in range(P):
            for c in range(C):
                W[p, c] = Y[p, c] + inc_row[p, c]
            _capped_simplex(W[p], U[p], rowb[p], rbuf)
            for c in range(C):
                inc_row[p, c] = W[p, c] - rbuf[c]
                change = max(change, abs(rbuf[c] - Y[p, c]))
                Y[p, c] = rbuf[c]
        for c in range(C):
            for p in range(P):
                cin[p] = Y[p, c] + inc_col[p, c]
                cu[p] = U[p, c]
            _capped_simplex(cin, cu, colb[c], cbuf)
            for p in range(P):
                inc_col[p, c] = cin[p] - cbuf[p]
                change = max(change, abs(cbuf[p] - Y[p, c]))
                Y[p, c] = cbuf[p]
        for b in range(nb):
            if norms[b] == 0.0:
                continue
            a = A[b]
            # W = Y + inc_slab[b] * a; project W onto the slab
            s = offsets[b]
            for p in range(P):
                for c in range(C):
                    s += a[p, c] * Y[p, c]
            s += inc_slab[b] * norms[b]
            excess = abs(s) - bounds[b]
            shift = 0.0
            if excess > 0:
                shift = -(excess if s > 0 else -excess) / norms[b]
            # Z = W + shift * a = Y + (inc + shift) * a; new increment is -shift
            move = inc_slab[b] + shift
            inc_slab[b] = -shift
            if move != 0.0:
                for p in range(P):
                    for c in range(C):
                        d = move * a[p, c]
                        Y[p, c] += d
                        change = max(change, abs(d))
        if change <= tol and _violation(Y, U, rowb, colb, coef, limits, gap_coef, gap0, cap) <= tol:
            return Y, sweep, True
    return Y, max_sweeps, False
