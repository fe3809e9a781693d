"""K-NN fused lasso: ADMM with a graph total-variation prox step.

Objective over signals ``theta`` on the design points::

    sum_k w_k (y_k - theta_k)^2 + lam * ||D theta||_1,   w_k = 1 / (n m_i)

with ``D`` the incidence matrix of a :class:`~tempspat.knn_graph.KnnGraph`.
ADMM splits ``theta = z``; the theta-step is diagonal and the z-step is the
TV prox ``argmin_z gamma ||D z||_1 + 1/2 ||v - z||^2`` with ``gamma = lam/rho``.

Both the prox and the full problem are finished by the same exact step:
guess which edges are fused from the dual variables, solve for one value
per fused component in closed form, then recover edge multipliers on the
fused edges by a grounded spanning-forest solve. When the multipliers land in
``[-1, 1]`` and the signs agree on the cut edges, the KKT system holds to
rounding error and the answer is certified.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components, minimum_spanning_tree

from .core import TemporalSpatialDataset, check_aligned
from .knn_graph import KnnGraph, graph_tv, knn_indices

__all__ = [
    "AdmmOptions",
    "AdmmState",
    "FitResult",
    "ProxCertificationError",
    "KnnflBracketError",
    "theta_update",
    "graph_tv_prox",
    "prox_kkt_residual",
    "fit_penalized_knnfl",
    "fit_constrained_knnfl",
    "knnfl_objective",
    "predict_knn_average",
]


class ProxCertificationError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class KnnflBracketError(RuntimeError):
    pass


@dataclass
class AdmmOptions:
    mu: float = 10.0
    tau_incr: float = 2.0
    tau_decr: float = 2.0
    rho0: float | None = None
    eps_abs: float = 1e-8
    eps_rel: float = 1e-6
    max_iter: int = 5000
    # Relative KKT tolerance for the prox and for the final certificate.
    prox_tol: float = 1e-9
    prox_max_iter: int = 200
    polish_every: int = 5
    # "dual": start ADMM from a direct solve of the weighted problem on the
    # edge dual (a certified start is a fixed point of the updates);
    # "cold": theta = z = y, u = 0.
    init: str = "dual"
    init_max_iter: int = 20_000
    budget_slack: float = 5e-3
    max_bisect: int = 80

    def __post_init__(self):
        if self.mu <= 1 or self.tau_incr <= 1 or self.tau_decr <= 1:
            raise ValueError("mu, tau_incr and tau_decr must exceed 1")
        if self.rho0 is not None and self.rho0 <= 0:
            raise ValueError("rho0 must be positive")
        if self.init not in ("dual", "cold"):
            raise ValueError("init must be 'dual' or 'cold'")


@dataclass
class AdmmState:
    theta: np.ndarray
    z: np.ndarray
    u: np.ndarray
    rho: float
    iteration: int = 0
    r_norm: float = math.inf
    s_norm: float = math.inf
    # Edge multipliers of the last prox, reused as a warm start.
    edge_dual: np.ndarray | None = None


@dataclass(frozen=True)
class FitResult:
    lam: float
    K: int
    converged: bool
    iterations: int
    rho_final: float
    r_norm: float
    s_norm: float
    graph_tv: float
    fitted: np.ndarray
    kkt_residual: float
    history: dict = field(default_factory=dict, repr=False, compare=False)
    state: AdmmState | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "K": self.K,
            "converged": self.converged,
            "iterations": self.iterations,
            "rho_final": self.rho_final,
            "r_norm": self.r_norm,
            "s_norm": self.s_norm,
            "graph_tv": self.graph_tv,
            "kkt_residual": self.kkt_residual,
            "fitted": [float(v) for v in self.fitted],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def theta_update(y, z, u, rho: float, weights) -> np.ndarray:
    """Minimizer of ``sum w (y - theta)^2 + rho/2 ||theta - z + u||^2``."""
    if not rho > 0:
        raise ValueError("rho must be positive")
    y, z, u, w = (np.asarray(a, dtype=float) for a in (y, z, u, weights))
    if not (y.shape == z.shape == u.shape == w.shape):
        raise ValueError("y, z, u and weights must have the same shape")
    return (2.0 * w * y + rho * (z - u)) / (rho + 2.0 * w)


# -- exact finishing step -------------------------------------------------------

def _kkt(x, v, c, gamma, s, g: KnnGraph) -> float:
    grad = c * (x - v) + gamma * _DT(s, g)
    scale = max(np.abs(c * v).max(initial=0.0), np.abs(c * x).max(initial=0.0), 1e-300)
    return float(np.abs(grad).max(initial=0.0) / scale)


def _D(x, g: KnnGraph):
    return g.incidence @ x


def _DT(s, g: KnnGraph):
    return g.incidence_t @ s


def _polish(v, c, gamma, g: KnnGraph, s, x, eta: float = 1e-7):
    """Exact solve on the fused partition suggested by ``(s, x)``.

    Returns ``(x, s, kkt)`` or None when the partition is inconsistent.
    """
    n, e = g.node_count, g.edges
    dx = _D(x, g)
    scale = max(np.abs(v).max(initial=0.0), 1e-300)
    internal = (np.abs(s) < 1.0 - eta) | (np.abs(dx) <= 1e-10 * scale)
    fixed = ~internal
    ei = e[internal]
    adj = sp.csr_matrix((np.ones(ei.shape[0]), (ei[:, 0], ei[:, 1])), shape=(n, n))
    ncomp, lab = connected_components(adj, directed=False)

    sigma = np.zeros(e.shape[0])
    sigma[fixed] = np.sign(s[fixed])
    sigma[fixed & (sigma == 0)] = np.sign(dx[fixed & (sigma == 0)])
    flow = _DT(sigma, g)
    csum = np.bincount(lab, weights=c, minlength=ncomp)
    vals = (np.bincount(lab, weights=c * v, minlength=ncomp)
            - gamma * np.bincount(lab, weights=flow, minlength=ncomp)) / csum
    xn = vals[lab]
    d = _D(xn, g)
    tiny = 1e-12 * max(np.abs(vals).max(initial=0.0), scale)
    if np.any(fixed & (np.abs(d) > tiny) & (np.sign(d) != sigma)):
        return None

    sn = sigma.copy()
    if ei.shape[0]:
        # Internal multipliers: keep the guess and add a flow correction
        # that balances each fused component.
        b = c * (v - xn) / gamma - flow
        s0 = np.clip(s[internal], -1.0, 1.0)
        r = b - (np.bincount(ei[:, 0], weights=s0, minlength=n)
                 - np.bincount(ei[:, 1], weights=s0, minlength=n))
        # Balance each component on a spanning forest that prefers edges with
        # slack (|s| small); a forest Laplacian factors without fill-in.
        wts = 1.0 + np.abs(s0)
        Aw = sp.csr_matrix((wts, (ei[:, 0], ei[:, 1])), shape=(n, n))
        T = minimum_spanning_tree(Aw).tocoo()
        on_tree = np.zeros(ei.shape[0], dtype=bool)
        if T.nnz:
            key = np.minimum(T.row, T.col).astype(np.int64) * n + np.maximum(T.row, T.col)
            ekey = ei[:, 0] * n + ei[:, 1]
            on_tree = np.isin(ekey, key)
        et = ei[on_tree]
        first = np.full(ncomp, n)
        np.minimum.at(first, lab, np.arange(n))
        free = np.ones(n, dtype=bool)
        free[first] = False
        s_int = s0.copy()
        if et.shape[0]:
            Dt = sp.csr_matrix(
                (np.tile([1.0, -1.0], et.shape[0]), (np.repeat(np.arange(et.shape[0]), 2), et.ravel())),
                shape=(et.shape[0], n),
            )
            L = (Dt.T @ Dt).tocsc()[free][:, free]
            try:
                pot = np.zeros(n)
                pot[free] = spla.splu(L.tocsc(), permc_spec="MMD_AT_PLUS_A").solve(r[free])
            except RuntimeError:
                return None
            s_int[on_tree] += pot[et[:, 0]] - pot[et[:, 1]]
        if np.abs(s_int).max(initial=0.0) > 1.0 + 1e-9:
            return None
        sn[internal] = np.clip(s_int, -1.0, 1.0)
    return xn, sn, _kkt(xn, v, c, gamma, sn, g)


# -- TV prox ------------------------------------------------------------------

def _dual_steps(g: KnnGraph, c: np.ndarray, gamma: float) -> np.ndarray:
    """Per-edge steps ``1 / sum_f |A_ef|`` for ``A = gamma D C^-1 D^T``.

    Inverse absolute row sums give a diagonal metric ``T`` with
    ``T^1/2 A T^1/2 <= I``, so projected gradient stays stable while edges
    between light, low-degree nodes take longer steps.
    """
    e = g.edges
    load = g.degrees / c
    return 1.0 / (gamma * (load[e[:, 0]] + load[e[:, 1]]))


def _weighted_tv_dual(v, c, gamma: float, g: KnnGraph, tol: float, max_iter: int,
                      s0: np.ndarray | None = None, check_every: int = 10,
                      gap_gate: float = 1e-3):
    """Solve ``min_x 1/2 sum c (x - v)^2 + gamma ||D x||_1`` on the edge dual.

    Accelerated projected gradient (diagonally preconditioned, with gradient
    restarts) on ``s in [-1, 1]^E`` where ``x(s) = v - gamma C^{-1} D^T s``. Whenever the
    duality gap is small and the set of saturated edges has changed, the
    partition is handed to :func:`_polish`. Returns
    ``(x, s, kkt, certified)``; when not certified, ``x = x(s)``.
    """
    E = g.edge_count
    s = np.zeros(E) if s0 is None else np.clip(s0, -1.0, 1.0)
    if gamma == 0 or E == 0:
        return v.copy(), s, 0.0, True
    step = _dual_steps(g, c, gamma)
    y, t = s.copy(), 1.0
    last_key = None
    next_try, failures = 0, 0
    for it in range(max_iter + 1):
        if (it % check_every == 0 and it >= next_try) or it == max_iter:
            x = v - gamma * _DT(s, g) / c
            dx = _D(x, g)
            tv = float(np.abs(dx).sum())
            gap = gamma * (tv - float(np.dot(s, dx)))
            primal = gamma * tv + 0.5 * float(np.dot(c, (x - v) ** 2))
            key = np.abs(s) >= 1.0 - 1e-7
            if gap <= gap_gate * max(primal, 1e-300) and (
                last_key is None or not np.array_equal(key, last_key)
            ):
                last_key = key
                res = _polish(v, c, gamma, g, s, x)
                if res is not None and res[2] <= tol:
                    return res[0], res[1], res[2], True
                # Back off after failed attempts; each one costs a few
                # dozen gradient steps.
                failures += 1
                next_try = it + check_every * 2 ** min(failures, 5)
            if it == max_iter:
                break
        xy = v - gamma * _DT(y, g) / c
        s_new = np.clip(y + step * _D(xy, g), -1.0, 1.0)
        if np.dot((y - s_new) / step, s_new - s) > 0:
            t, y = 1.0, s_new
        else:
            t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            y = s_new + ((t - 1.0) / t_new) * (s_new - s)
            t = t_new
        s = s_new
    x = v - gamma * _DT(s, g) / c
    return x, s, _kkt(x, v, c, gamma, s, g), False


def _prox_dual(v, g: KnnGraph, gamma: float, tol: float, max_iter: int,
               s0: np.ndarray | None = None):
    return _weighted_tv_dual(v, np.ones_like(v), gamma, g, tol, max_iter, s0)


def graph_tv_prox(v, g: KnnGraph, gamma: float, tol: float = 1e-9,
                  max_iter: int = 20_000, s0=None, return_dual: bool = False):
    """``argmin_z gamma ||D z||_1 + 1/2 ||v - z||^2`` with a KKT certificate.

    Raises :class:`ProxCertificationError` if the residual
    ``||z - v + gamma D^T s||_inf`` (relative to ``||v||_inf``) cannot be
    brought under ``tol``.
    """
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    v = check_aligned_nodes(v, g)
    z, s, kkt, ok = _prox_dual(v, g, float(gamma), tol, max_iter, s0)
    if not ok:
        raise ProxCertificationError(
            f"TV prox not certified after {max_iter} iterations (KKT residual {kkt:.3g})", kkt
        )
    return (z, s) if return_dual else z


def prox_kkt_residual(z, v, g: KnnGraph, gamma: float, s) -> float:
    """Relative ``||z - v + gamma D^T s||_inf`` after checking ``s`` is a subgradient of ``||D z||_1``."""
    z = np.asarray(z, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.abs(s).max(initial=0.0) > 1.0 + 1e-12:
        return math.inf
    dz = _D(z, g)
    nz = np.abs(dz) > 1e-12 * max(np.abs(z).max(initial=0.0), 1e-300)
    if np.any(s[nz] != np.sign(dz[nz])):
        return math.inf
    return _kkt(z, np.asarray(v, dtype=float), np.ones_like(z), gamma, s, g)


def check_aligned_nodes(v, g: KnnGraph) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (g.node_count,):
        from .core import AlignmentError

        raise AlignmentError(f"signal has shape {v.shape}, expected ({g.node_count},)")
    return v


# -- ADMM -----------------------------------------------------------------------

def knnfl_objective(theta, dataset: TemporalSpatialDataset, g: KnnGraph, lam: float) -> float:
    w = dataset.weights()
    return float(np.dot(w, (dataset.y - theta) ** 2)) + lam * graph_tv(theta, g)


def _check_graph(dataset: TemporalSpatialDataset, g: KnnGraph):
    if g.node_count != dataset.size:
        raise ValueError(f"graph has {g.node_count} nodes, dataset has {dataset.size} points")


def fit_penalized_knnfl(
    dataset: TemporalSpatialDataset,
    g: KnnGraph,
    lam: float,
    opts: AdmmOptions | None = None,
    warm: AdmmState | None = None,
) -> FitResult:
    """ADMM for the K-NN fused lasso at penalty ``lam``.

    Iterates are kept in units where the weights have mean one; reported
    ``rho``, ``s_norm`` and the state are converted back.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    _check_graph(dataset, g)
    opts = opts or AdmmOptions()
    y = dataset.y
    w = dataset.weights()
    N = dataset.size
    wscale = float(w.mean())
    wn = w / wscale
    lam_n = lam / wscale
    c = 2.0 * wn

    if warm is not None:
        theta, z, u = warm.theta.copy(), warm.z.copy(), warm.u.copy()
        rho = warm.rho / wscale
        s_edge = None if warm.edge_dual is None else warm.edge_dual.copy()
    else:
        theta, z, u = y.copy(), y.copy(), np.zeros(N)
        if opts.rho0 is not None:
            rho = opts.rho0 / wscale
        else:
            rho = lam_n if lam_n > 0 else float(c.mean())
        s_edge = None
    if opts.init == "dual" and lam_n > 0:
        x0, s_edge, _, _ = _weighted_tv_dual(y, c, lam_n, g, opts.prox_tol, opts.init_max_iter, s_edge)
        theta, z = x0.copy(), x0.copy()
        u = lam_n * _DT(s_edge, g) / rho

    hist = {"r_norm": [], "s_norm": [], "rho": [], "objective": []}
    converged = False
    kkt = math.inf
    r_norm = s_norm = math.inf
    since_polish = 0
    it = 0
    for it in range(1, opts.max_iter + 1):
        theta = theta_update(y, z, u, rho, wn)
        z_old = z
        v = theta + u
        gamma = lam_n / rho
        z, s_edge, _, _ = _prox_dual(v, g, gamma, opts.prox_tol, opts.prox_max_iter, s_edge)
        u = u + theta - z
        r_norm = float(np.linalg.norm(theta - z))
        s_norm = float(rho * np.linalg.norm(z - z_old))
        eps_pri = math.sqrt(N) * opts.eps_abs + opts.eps_rel * max(np.linalg.norm(theta), np.linalg.norm(z))
        eps_dual = math.sqrt(N) * opts.eps_abs + opts.eps_rel * float(np.linalg.norm(rho * u))
        hist["r_norm"].append(r_norm)
        hist["s_norm"].append(s_norm * wscale)
        hist["rho"].append(rho * wscale)
        hist["objective"].append(knnfl_objective(z, dataset, g, lam))
        if r_norm <= eps_pri and s_norm <= eps_dual:
            converged = True
            break

        since_polish += 1
        if lam_n > 0 and since_polish >= opts.polish_every:
            since_polish = 0
            res = _polish(y, c, lam_n, g, s_edge, z)
            if res is not None and res[2] <= opts.prox_tol:
                # Jump to the certified fixed point; the next pass through
                # the updates then leaves it unchanged.
                z = res[0]
                s_edge = res[1]
                u = lam_n * _DT(s_edge, g) / rho
                theta = z.copy()
                continue

        if r_norm > opts.mu * s_norm:
            rho *= opts.tau_incr
            u /= opts.tau_incr
        elif s_norm > opts.mu * r_norm:
            rho /= opts.tau_decr
            u *= opts.tau_decr

    if lam_n > 0:
        kkt = _full_kkt(y, c, lam_n, g, z, s_edge)
    else:
        kkt = float(np.abs(c * (z - y)).max() / max(np.abs(c * y).max(), 1e-300))
    state = AdmmState(theta=theta, z=z, u=u, rho=rho * wscale, iteration=it,
                      r_norm=r_norm, s_norm=s_norm * wscale, edge_dual=s_edge)
    return FitResult(
        lam=float(lam), K=g.K, converged=converged, iterations=it, rho_final=rho * wscale,
        r_norm=r_norm, s_norm=s_norm * wscale, graph_tv=graph_tv(z, g), fitted=z,
        kkt_residual=kkt, history=hist, state=state,
    )


def _full_kkt(y, c, lam_n, g, z, s_edge) -> float:
    """Residual of the full problem's KKT system at ``z`` with a subgradient
    built from ``s_edge`` (signs forced where ``D z`` is nonzero)."""
    dz = _D(z, g)
    s = np.clip(s_edge, -1.0, 1.0).copy()
    nz = np.abs(dz) > 1e-12 * max(np.abs(z).max(initial=0.0), 1e-300)
    s[nz] = np.sign(dz[nz])
    return _kkt(z, y, c, lam_n, s, g)


def fit_constrained_knnfl(
    dataset: TemporalSpatialDataset,
    g: KnnGraph,
    budget: float,
    opts: AdmmOptions | None = None,
) -> FitResult:
    """Loss minimizer under a TV budget, by bisection on the penalty.

    Returns the ``lam = 0`` fit when the data already meet the budget,
    otherwise a fit with ``budget <= graph_tv <= budget * (1 + opts.budget_slack)``.
    """
    if budget <= 0:
        raise ValueError("TV budget must be positive")
    _check_graph(dataset, g)
    opts = opts or AdmmOptions()
    slack = opts.budget_slack
    fit0 = fit_penalized_knnfl(dataset, g, 0.0, opts)
    if graph_tv(dataset.y, g) <= budget:
        return fit0

    # Accept from above; see fit_constrained_tf.
    def ok(f):
        return budget <= f.graph_tv <= budget * (1 + slack)

    w = dataset.weights()
    # Starting guess: penalty at which the loss gradient of the data is of
    # the same size as the TV subgradient.
    lam = float(2.0 * np.abs(w * (dataset.y - np.dot(w, dataset.y))).max()) or float(w.mean())
    lo = hi = None
    fit = fit_penalized_knnfl(dataset, g, lam, opts)
    for _ in range(opts.max_bisect):
        if ok(fit):
            return fit
        if fit.graph_tv > budget:
            lo = lam
            if hi is None:
                lam *= 4.0
        else:
            hi = lam
            if lo is None:
                lam /= 4.0
        if lo is not None and hi is not None:
            if hi / lo - 1.0 < 1e-12:
                break
            lam = math.sqrt(lo * hi)
        fit = fit_penalized_knnfl(dataset, g, lam, opts, warm=fit.state)
    raise KnnflBracketError(
        f"bisection on lambda did not meet TV budget {budget:g} (bracket {lo}, {hi})"
    )


def predict_knn_average(x_new, dataset: TemporalSpatialDataset, fitted, K: int) -> np.ndarray:
    """Predictions at ``x_new`` (shape ``(q, d)`` or ``(d,)``).

    A query equal to a design point takes that point's fitted value (the
    smallest flat index among duplicates); any other query takes the mean
    fitted value of its ``K`` nearest design points, ties by flat index.
    """
    fitted = check_aligned(fitted, dataset, "fitted")
    q = np.asarray(x_new, dtype=float)
    single = q.ndim == 1 and dataset.d > 1 or q.ndim == 0
    q = q.reshape(-1, dataset.d)
    if not np.all(np.isfinite(q)) or np.any(q < 0) or np.any(q > 1):
        raise ValueError("prediction points must lie in [0, 1]^d")
    if not 1 <= K <= dataset.size:
        raise ValueError(f"K={K} must lie in 1..{dataset.size}")
    nbr = knn_indices(dataset.x, q, K)
    first = nbr[:, 0]
    exact = np.all(dataset.x[first] == q, axis=1)
    out = fitted[nbr].mean(axis=1)
    out[exact] = fitted[first[exact]]
    return out[0] if single else out
