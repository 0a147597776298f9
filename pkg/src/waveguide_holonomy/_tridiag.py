"""Lowest eigenpairs of the finite-difference Hamiltonian by bisection and inverse iteration.

The kernels are compiled with numba; they release the GIL so grid sweeps can
run on threads.
"""

import numpy as np
from numba import njit


# ---------------------------------------------------------------------------
# Laplacian plus diagonal, A = tridiag(-1, 2, -1) + diag(delta)
#
# Forming 2 + delta in floating point rounds away the potential at the level of
# eps * 2, which is far above the level gaps of h^2 * V. Instead A - sigma is
# factored as L D L^T with the pivots written as the exact Laplacian pivots
# (i + 2) / (i + 1) plus a non-negative correction that accumulates without
# cancellation. Shifts are then applied to the factors (differential
# stationary qds), which keeps small eigenvalues and their vectors accurate to
# a few ulps relative to the level spacing.
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def laplacian_ldl(delta, sigma):
    """Pivots D and multipliers L of A - sigma = L D L^T for sigma <= min(delta)."""
    n = delta.shape[0]
    D = np.empty(n)
    Lm = np.empty(max(n - 1, 0))
    s = delta[0] - sigma
    D[0] = 2.0 + s
    for i in range(1, n):
        P_prev = (i + 1.0) / i
        # D_i - P_i = delta_i - sigma + s_{i-1} / (P_{i-1} D_{i-1}), all terms >= 0
        s = (delta[i] - sigma) + s / (P_prev * D[i - 1])
        D[i] = (i + 2.0) / (i + 1.0) + s
    for i in range(n - 1):
        Lm[i] = -1.0 / D[i]
    return D, Lm


@njit(cache=True, nogil=True)
def _stqds(D, Lm, tau):
    """L+ D+ L+^T = L D L^T - tau by the differential stationary qds transform."""
    n = D.shape[0]
    Dp = np.empty(n)
    Lp = np.empty(max(n - 1, 0))
    s = -tau
    for i in range(n - 1):
        Dp[i] = s + D[i]
        if Dp[i] == 0.0:
            Dp[i] = 1e-300
        Lp[i] = D[i] * Lm[i] / Dp[i]
        s = Lp[i] * Lm[i] * s - tau
    Dp[n - 1] = s + D[n - 1]
    if Dp[n - 1] == 0.0:
        Dp[n - 1] = 1e-300
    return Dp, Lp


@njit(cache=True, nogil=True)
def ldl_count(D, Lm, tau):
    """Number of eigenvalues of L D L^T strictly below ``tau``."""
    n = D.shape[0]
    count = 0
    s = -tau
    for i in range(n - 1):
        dp = s + D[i]
        if dp < 0.0:
            count += 1
        if dp == 0.0:
            dp = 1e-300
        s = D[i] * Lm[i] * Lm[i] * s / dp - tau
    if s + D[n - 1] < 0.0:
        count += 1
    return count


@njit(cache=True, nogil=True)
def _ldl_solve(Dp, Lp, b):
    n = Dp.shape[0]
    y = b.copy()
    for i in range(1, n):
        y[i] -= Lp[i - 1] * y[i - 1]
    for i in range(n):
        y[i] /= Dp[i]
    for i in range(n - 2, -1, -1):
        y[i] -= Lp[i] * y[i + 1]
    return y


@njit(cache=True, nogil=True)
def _ldl_rayleigh(D, Lm, v):
    """v^T L D L^T v as a sum of non-negative terms."""
    n = D.shape[0]
    acc = 0.0
    for i in range(n - 1):
        t = v[i] + Lm[i] * v[i + 1]
        acc += D[i] * t * t
    acc += D[n - 1] * v[n - 1] * v[n - 1]
    return acc


@njit(cache=True, nogil=True)
def laplacian_eigenpairs(delta, k, iters, rtol):
    """Lowest ``k`` eigenpairs of tridiag(-1, 2, -1) + diag(delta).

    Bisection brackets each level to relative width ``rtol``; inverse iteration
    on the shifted factors and a Rayleigh quotient finish the job. Returns
    eigenvalues mu, orthonormal eigenvectors (columns, Euclidean norm
    1) and the residual norms ||A v - mu v|| evaluated with A assembled in
    floating point.
    """
    n = delta.shape[0]
    sigma = delta[0]
    for i in range(n):
        sigma = min(sigma, delta[i])
    D, Lm = laplacian_ldl(delta, sigma)
    # eigenvalues of L D L^T are mu - sigma > 0; bracket from a tiny upper end
    hi = 1.0 / ((n + 1.0) * (n + 1.0))
    while ldl_count(D, Lm, hi) < k:
        hi *= 2.0
    taus = np.empty(k)
    left = 0.0
    for j in range(k):
        a = left
        b = hi
        while b - a > rtol * b:
            mid = 0.5 * (a + b)
            if mid <= a or mid >= b:
                break
            if ldl_count(D, Lm, mid) > j:
                b = mid
            else:
                a = mid
        taus[j] = 0.5 * (a + b)
        left = a
    vecs = np.zeros((k, n))
    mus = np.empty(k)
    res = np.empty(k)
    start = np.empty(n)
    for i in range(n):
        start[i] = 1.0 + 0.5 * np.sin(1.0 + 0.37 * i)
    for j in range(k):
        Dp, Lp = _stqds(D, Lm, taus[j])
        v = start / np.sqrt(np.sum(start * start))
        for _ in range(iters):
            w = _ldl_solve(Dp, Lp, v)
            for p in range(j):
                w -= np.dot(vecs[p], w) * vecs[p]
            v = w / np.sqrt(np.sum(w * w))
        lam = _ldl_rayleigh(D, Lm, v)
        if abs(lam - taus[j]) > 4.0 * rtol * taus[j]:
            # the vector belongs to another level
            res[j] = np.inf
        else:
            r = 0.0
            for i in range(n):
                Av = (2.0 + delta[i]) * v[i]
                if i > 0:
                    Av -= v[i - 1]
                if i < n - 1:
                    Av -= v[i + 1]
                r += (Av - (lam + sigma) * v[i]) ** 2
            res[j] = np.sqrt(r)
        mus[j] = lam + sigma
        vecs[j] = v
    return mus, vecs.T.copy(), res
