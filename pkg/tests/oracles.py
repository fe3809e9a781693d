"""Reference implementations used only by the tests.

Each one solves its problem by a route unrelated to the package code:
taut string for chains, bounded least squares on the edge dual for general
graphs, derivative root finding for the theta-step, an all-pairs sort for
nearest neighbors and a plain loop for the coefficient recursion.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import brentq, lsq_linear


def taut_string(y, lam: float) -> np.ndarray:
    """``argmin_x 1/2 ||y - x||^2 + lam sum |x_{i+1} - x_i|`` (Condat's direct algorithm)."""
    y = np.asarray(y, dtype=float)
    n = y.size
    x = np.empty(n)
    if n == 0:
        return x
    k = k0 = kplus = kminus = 0
    umin, umax = lam, -lam
    vmin, vmax = y[0] - lam, y[0] + lam
    while True:
        while k == n - 1:
            if umin < 0.0:
                while True:
                    x[k0] = vmin
                    k0 += 1
                    if k0 > kminus:
                        break
                k = kminus = k0
                vmin = y[k]
                umin = lam
                umax = vmin + umin - vmax
            elif umax > 0.0:
                while True:
                    x[k0] = vmax
                    k0 += 1
                    if k0 > kplus:
                        break
                k = kplus = k0
                vmax = y[k]
                umax = -lam
                umin = vmax + umax - vmin
            else:
                vmin += umin / (k - k0 + 1)
                x[k0:k + 1] = vmin
                return x
        umin += y[k + 1] - vmin
        if umin < -lam:
            while True:
                x[k0] = vmin
                k0 += 1
                if k0 > kminus:
                    break
            k = kplus = kminus = k0
            vmin = y[k]
            vmax = vmin + 2 * lam
            umin, umax = lam, -lam
            continue
        umax += y[k + 1] - vmax
        if umax > lam:
            while True:
                x[k0] = vmax
                k0 += 1
                if k0 > kplus:
                    break
            k = kplus = kminus = k0
            vmax = y[k]
            vmin = vmax - 2 * lam
            umin, umax = lam, -lam
            continue
        k += 1
        if umin >= lam:
            kminus = k
            vmin += (umin - lam) / (kminus - k0 + 1)
            umin = lam
        if umax <= -lam:
            kplus = k
            vmax += (umax + lam) / (kplus - k0 + 1)
            umax = -lam


def box_dual_prox(v, edges, n: int, gamma: float) -> np.ndarray:
    """Graph TV prox through its dual: ``s = argmin_{|s|<=1} ||v - gamma D^T s||``, ``z = v - gamma D^T s``."""
    v = np.asarray(v, dtype=float)
    edges = np.asarray(edges, dtype=int).reshape(-1, 2)
    if edges.shape[0] == 0 or gamma == 0:
        return v.copy()
    Dt = np.zeros((n, edges.shape[0]))
    for e, (a, b) in enumerate(edges):
        Dt[a, e] = 1.0
        Dt[b, e] = -1.0
    sol = lsq_linear(gamma * Dt, v, bounds=(-1.0, 1.0), method="bvls", tol=1e-15)
    return v - gamma * Dt @ sol.x


def theta_scalar(y: float, z: float, u: float, rho: float, w: float) -> float:
    """Root of the derivative of ``w (y - t)^2 + rho/2 (t - z + u)^2``."""
    def deriv(t):
        return -2.0 * w * (y - t) + rho * (t - z + u)
    lo = min(y, z - u) - 1.0
    hi = max(y, z - u) + 1.0
    return brentq(deriv, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)


def brute_knn_edges(points, K: int) -> set:
    """Symmetrized K-NN edge set by sorting all pairs on (distance^2, index)."""
    p = np.asarray(points, dtype=float)
    if p.ndim == 1:
        p = p[:, None]
    n = p.shape[0]
    edges = set()
    for a in range(n):
        cand = sorted(
            ((float(np.sum((p[a] - p[b]) ** 2)), b) for b in range(n) if b != a)
        )
        for _, b in cand[:K]:
            edges.add((min(a, b), max(a, b)))
    return edges


def replay_coefficients(seed: int, n: int, T: int, b_sd: float, ar: float) -> np.ndarray:
    """``c_{t,i} = ar c_{t,i-1} + b_{t,i} / t`` replayed term by term from the documented streams."""
    out = np.zeros((n, T))
    prev = [0.0] * T
    for i in range(n):
        gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(1, i))))
        b = gen.normal(0.0, b_sd, T)
        cur = [ar * prev[t] + b[t] / (t + 1) for t in range(T)]
        out[i] = cur
        prev = cur
    return out


def path_tv(x) -> float:
    return float(np.abs(np.diff(np.asarray(x, dtype=float))).sum())
