"""
Compiled fast path for the block objective.

While one anchor pair is searched, the contributions of all other pairs to
J~^T J~, J~^T b and the FIM are constant. ``block_mse`` adds the trial pair
to those partial sums and evaluates the bound at every sample point in one
compiled loop. Results agree with :func:`metric.combine` up to summation
order; points whose normal matrix falls in the QR regime are flagged so the
caller can redo the evaluation on the reference path.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

COND_SINGULAR = 1e12
COND_QR = 1e6
SLAB_EPS = 1e-9


@njit(cache=True)
def inside_any(p, lo, hi, margin):
    """True if p lies inside some box shrunk by ``margin`` (negative grows it)."""
    for k in range(lo.shape[0]):
        ok = True
        for a in range(p.shape[0]):
            if not (lo[k, a] + margin < p[a] < hi[k, a] - margin):
                ok = False
                break
        if ok:
            return True
    return False


@njit(cache=True)
def _link(p0, p1, lo, hi, codes):
    n = p0.shape[0]
    status = 0
    for k in range(lo.shape[0]):
        if codes[k] <= status:
            continue
        enter = 0.0
        leave = 1.0
        hit = True
        for a in range(n):
            l = lo[k, a] - SLAB_EPS
            h = hi[k, a] + SLAB_EPS
            d = p1[a] - p0[a]
            o = p0[a]
            if abs(d) < 1e-15:
                if o < l or o > h:
                    hit = False
                    break
            else:
                t0 = (l - o) / d
                t1 = (h - o) / d
                if t0 > t1:
                    t0, t1 = t1, t0
                if t0 > enter:
                    enter = t0
                if t1 < leave:
                    leave = t1
        if hit and enter <= leave:
            status = codes[k]
    return status


@njit(cache=True)
def _eig_extremes(M, n):
    """Smallest and largest eigenvalue of a symmetric 2x2 or 3x3 matrix."""
    if n == 2:
        a = M[0, 0]
        b = M[0, 1]
        d = M[1, 1]
        half = 0.5 * (a + d)
        r = math.sqrt(0.25 * (a - d) * (a - d) + b * b)
        hi = half + r
        det = a * d - b * b
        lo = det / hi if hi > 0 else half - r
        return lo, hi
    ev = np.linalg.eigvalsh(M)
    return ev[0], ev[n - 1]


@njit(cache=True)
def _cond(M, n):
    lo, hi = _eig_extremes(M, n)
    if hi <= 0 or lo <= 0:
        return np.inf
    return hi / lo


@njit(cache=True)
def _chol_solve(M, b, n):
    """Solve M x = b for SPD M (n <= 3) by Cholesky."""
    L = np.zeros((3, 3))
    for i in range(n):
        for j in range(i + 1):
            s = M[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                L[i, i] = math.sqrt(s) if s > 0 else 1e-300
            else:
                L[i, j] = s / L[j, j]
    y = np.zeros(3)
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * y[k]
        y[i] = s / L[i, i]
    x = np.zeros(n)
    for i in range(n - 1, -1, -1):
        s = y[i]
        for k in range(i + 1, n):
            s -= L[k, i] * x[k]
        x[i] = s / L[i, i]
    return x


@njit(cache=True)
def block_mse(st, a_i, a_j, lo, hi, codes, tag_mean, tag_var, aa_var, sigma2, op_range,
              A0, c0, F0, act0, coinc0, step):
    """Per-point MSE bound after adding pair (a_i, a_j) to fixed partial sums.

    Returns (mse, active, needs_reference) where mse is inf at unlocalizable
    points and active counts the usable pairs per point.
    """
    S, N, n = st.shape
    mse = np.empty(N)
    active_out = np.empty(N, dtype=np.int64)
    needs_ref = False
    s_aa = _link(a_i, a_j, lo, hi, codes)
    d_aa = 0.0
    for a in range(n):
        d_aa += (a_i[a] - a_j[a]) ** 2
    d_aa = math.sqrt(d_aa)

    A = np.zeros((n, n))
    c = np.zeros(n)
    F = np.zeros((n, n))
    beta = np.zeros((S, n))
    u = np.zeros(n)

    for i in range(N):
        p = st[0, i]
        s_i = _link(p, a_i, lo, hi, codes)
        s_j = _link(p, a_j, lo, hi, codes)
        ri = 0.0
        rj = 0.0
        for a in range(n):
            ri += (p[a] - a_i[a]) ** 2
            rj += (p[a] - a_j[a]) ** 2
        ri = math.sqrt(ri)
        rj = math.sqrt(rj)
        r_max = max(ri, rj, d_aa)
        on = r_max <= op_range and s_i != 3 and s_j != 3 and s_aa != 3
        mean = tag_mean[s_j] - tag_mean[s_i]
        var = sigma2 + tag_var[s_i] + tag_var[s_j] + aa_var[s_aa]

        active = act0[i] + (1 if on else 0)
        active_out[i] = active
        if coinc0[i] or active < n or (on and (ri == 0.0 or rj == 0.0)):
            mse[i] = np.inf
            continue

        bad = False
        for s in range(S):
            q = st[s, i]
            if on:
                dri = 0.0
                drj = 0.0
                for a in range(n):
                    dri += (q[a] - a_i[a]) ** 2
                    drj += (q[a] - a_j[a]) ** 2
                dri = math.sqrt(dri)
                drj = math.sqrt(drj)
                for a in range(n):
                    u[a] = (q[a] - a_j[a]) / drj - (q[a] - a_i[a]) / dri
            for a in range(n):
                c[a] = c0[s, i, a] + (u[a] * mean if on else 0.0)
                for b in range(n):
                    A[a, b] = A0[s, i, a, b] + (u[a] * u[b] if on else 0.0)
                    if s == 0:
                        F[a, b] = F0[i, a, b] + (u[a] * u[b] / var if on else 0.0)
            cA = _cond(A, n)
            if cA > COND_SINGULAR:
                bad = True
                break
            if cA > COND_QR:
                needs_ref = True
            x = _chol_solve(A, c, n)
            for a in range(n):
                beta[s, a] = x[a]
        if bad:
            mse[i] = np.inf
            continue

        for a in range(n):
            for b in range(a):
                v = 0.5 * (F[a, b] + F[b, a])
                F[a, b] = v
                F[b, a] = v
        if _cond(F, n) > COND_SINGULAR:
            mse[i] = np.inf
            continue

        # G = I + D, M = Tr(G F^-1 G^T) + |beta|^2 = sum over rows g of g^T F^-1 g
        total = 0.0
        g = np.zeros(n)
        for r in range(n):
            for k in range(n):
                g[k] = (beta[1 + 2 * k, r] - beta[2 + 2 * k, r]) / (2.0 * step)
            g[r] += 1.0
            x = _chol_solve(F, g, n)
            for k in range(n):
                total += g[k] * x[k]
        for a in range(n):
            total += beta[0, a] * beta[0, a]
        mse[i] = total
    return mse, active_out, needs_ref
