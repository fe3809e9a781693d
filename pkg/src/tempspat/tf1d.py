"""Univariate trend filtering under the weighted temporal-spatial loss.

Solves, for ``d = 1`` data and order ``k >= 1``::

    min_phi  sum_{i,j} (y_ij - phi_g(ij))^2 / (n m_i) + lam * ||D^(k) phi||_1
    s.t.     sum_{i,j} phi_g(ij) = 0

where ``phi`` lives on the sorted unique design positions and ``D^(k)`` is a
divided-difference operator, so that ``||D^(k) phi||_1`` is the discrete total
variation of the ``(k-1)``-th derivative.

The solver is ADMM on the split ``z = D phi``. The phi-step is a banded SPD
solve with the zero-sum multiplier eliminated in closed form (a rank-one
correction); the z-step is soft thresholding. Once the sparsity pattern of
``z`` settles, the equality-constrained QP on that pattern is solved exactly
and accepted only if its multipliers form a valid subgradient, which yields a
KKT certificate at machine precision. For ``k >= 2`` on irregular designs
ADMM can crawl; after ``fallback_after`` iterations an interior-point solve of
the box-constrained dual supplies the pattern instead.

Very small gaps between positions make ``D^(k)`` badly conditioned for
``k >= 3``; such fits may fail to certify and raise
:class:`TfConvergenceError` with the residual history attached.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import make_interp_spline
from scipy.optimize import lsq_linear

from .core import TemporalSpatialDataset

__all__ = [
    "DifferenceOperator",
    "TfOptions",
    "TfFit",
    "TfConvergenceError",
    "difference_matrix",
    "build_difference_operator",
    "fit_penalized_tf",
    "fit_constrained_tf",
    "evaluate_tf",
    "tf_kkt_residual",
]


class TfConvergenceError(RuntimeError):
    """Raised when a fit cannot be certified within the iteration budget."""

    def __init__(self, message: str, history: dict | None = None):
        super().__init__(message)
        self.history = history or {}


def difference_matrix(t: np.ndarray, k: int) -> sp.csr_matrix:
    """Order-``k`` divided-difference operator on sorted unique positions ``t``.

    ``D^(1)`` is the plain first difference; higher orders recurse as
    ``D^(j+1) = D^(1) diag(j / (t_{r+j} - t_r)) D^(j)``, so each row of
    ``D^(k)`` is a difference of ``(k-1)! x`` order-``(k-1)`` divided
    differences and has at most ``k+1`` nonzeros.
    """
    t = np.asarray(t, dtype=float)
    q = t.size
    if k < 1:
        raise ValueError("order k must be >= 1")
    if q <= k:
        raise ValueError(f"need more than k={k} unique positions, got {q}")

    def first_diff(size: int) -> sp.csr_matrix:
        return sp.diags([-np.ones(size - 1), np.ones(size - 1)], [0, 1], shape=(size - 1, size), format="csr")

    D = first_diff(q)
    for j in range(1, k):
        scale = j / (t[j:] - t[: q - j])
        D = first_diff(q - j) @ sp.diags(scale) @ D
    return D.tocsr()


@dataclass(frozen=True)
class DifferenceOperator:
    """Divided-difference operator on the unique design positions of a dataset."""

    k: int
    positions: np.ndarray
    matrix: sp.csr_matrix = field(repr=False)
    group: np.ndarray = field(repr=False)

    @property
    def q(self) -> int:
        return int(self.positions.size)

    def apply(self, phi: np.ndarray) -> np.ndarray:
        return self.matrix @ np.asarray(phi, dtype=float)


def build_difference_operator(dataset: TemporalSpatialDataset, k: int) -> DifferenceOperator:
    """Merge duplicate positions and build ``D^(k)`` on the unique ones."""
    if dataset.d != 1:
        raise ValueError(f"trend filtering needs d = 1, dataset has d = {dataset.d}")
    positions, group = np.unique(dataset.x[:, 0], return_inverse=True)
    if positions.size <= k:
        raise ValueError(
            f"insufficient support: {positions.size} unique positions for order k={k}"
        )
    return DifferenceOperator(k, positions, difference_matrix(positions, k), group.ravel())


@dataclass
class TfOptions:
    tol: float = 1e-6
    max_iter: int = 50_000
    max_bisect: int = 100
    bisect_slack: float = 1e-4
    rho0: float | None = None
    mu: float = 10.0
    tau_incr: float = 2.0
    tau_decr: float = 2.0
    polish_every: int = 10
    # ADMM iterations before the interior-point fallback is tried.
    fallback_after: int = 500


@dataclass
class TfFit:
    k: int
    lam: float
    fitted: np.ndarray
    phi: np.ndarray
    positions: np.ndarray
    tv_value: float
    iterations: int = 0
    r_norm: float = 0.0
    s_norm: float = 0.0
    kkt_residual: float = 0.0
    objective_history: list = field(default_factory=list, repr=False)

    def to_json(self) -> str:
        return json.dumps(
            {
                "k": self.k,
                "lambda": self.lam,
                "tv_value": self.tv_value,
                "phi": self.phi.tolist(),
                "positions": self.positions.tolist(),
                "diagnostics": {
                    "iterations": self.iterations,
                    "r_norm": self.r_norm,
                    "s_norm": self.s_norm,
                    "kkt_residual": self.kkt_residual,
                },
            },
            indent=1,
        )


def _soft(v: np.ndarray, t: float) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def _upper_banded(A: sp.spmatrix, bw: int) -> np.ndarray:
    """Symmetric ``A`` in the upper storage used by ``cholesky_banded``."""
    A = sp.dia_matrix(A)
    ab = np.zeros((bw + 1, A.shape[0]))
    for off, row in zip(A.offsets, A.data):
        if 0 <= off <= bw:
            # dia stores A[i, i+off] at data[:, i+off]; upper-form row is bw-off.
            ab[bw - off, off:] = row[off:]
    return ab


class _TfProblem:
    """Aggregated per-position problem shared by every lambda on one dataset."""

    def __init__(self, dataset: TemporalSpatialDataset, k: int):
        self.dataset = dataset
        self.op = build_difference_operator(dataset, k)
        w = dataset.weights()
        g = self.op.group
        q = self.op.q
        self.W = np.bincount(g, weights=w, minlength=q)
        self.counts = np.bincount(g, minlength=q).astype(float)
        self.ybar = np.bincount(g, weights=w * dataset.y, minlength=q) / self.W
        # Work in units where the mean position weight is one.
        self.wscale = float(self.W.mean())
        self.Wn = self.W / self.wscale
        self.D = self.op.matrix
        self.DT = self.D.T.tocsr()
        # Per-row metric for the ADMM coupling term; uniform when k = 1.
        rn2 = np.asarray(self.D.multiply(self.D).sum(axis=1)).ravel()
        self.p = rn2.mean() / rn2
        self.rownorm = np.sqrt(rn2)
        self.Dn = (sp.diags(1.0 / self.rownorm) @ self.D).tocsr()
        self.DtPD = (self.DT @ sp.diags(self.p) @ self.D).tocsr()
        self.const = float(np.dot(w, (dataset.y - self.ybar[g]) ** 2))

    def loss(self, phi: np.ndarray) -> float:
        return float(np.dot(self.W, (phi - self.ybar) ** 2)) + self.const

    def tv(self, phi: np.ndarray) -> float:
        return float(np.abs(self.D @ phi).sum())

    # -- closed forms ------------------------------------------------------
    def centered_wls(self) -> np.ndarray:
        """lam = 0: weighted least squares under the zero-sum constraint."""
        nu = np.dot(self.counts, self.ybar) / np.dot(self.counts, self.counts / (2.0 * self.W))
        return self.ybar - nu * self.counts / (2.0 * self.W)

    def banded(self, rho: float) -> np.ndarray:
        return _upper_banded(self.DtPD * rho + sp.diags(2.0 * self.Wn), self.op.k)

    def _solve_pattern(self, S: np.ndarray, sigma: np.ndarray, lam_n: float):
        """Equality-constrained QP with ``D_F phi = 0`` off the pattern ``S``."""
        F = np.setdiff1d(np.arange(self.D.shape[0]), S, assume_unique=True)
        Winv = 1.0 / (2.0 * self.Wn)
        rhs_phi = self.ybar - Winv * (lam_n * (self.DT[:, S] @ sigma)) if S.size else self.ybar.copy()
        # Row-normalized constraints: same null space, far better conditioning.
        DF = self.Dn[F]
        c = self.counts
        bF, bc = DF @ rhs_phi, float(np.dot(c, rhs_phi))
        if F.size:
            # Rows of D_F overlap only within k positions, so D_F W^-1 D_F^T
            # is banded; the dense zero-sum row goes through a Schur complement.
            A = DF @ sp.diags(Winv) @ DF.T
            v = DF @ (Winv * c)
            try:
                cb = sla.cholesky_banded(_upper_banded(A, self.op.k), lower=False)
                Ab = sla.cho_solve_banded((cb, False), bF)
                Av = sla.cho_solve_banded((cb, False), v)
            except (np.linalg.LinAlgError, ValueError):
                M = sp.bmat([[A, v[:, None]], [v[None, :], np.dot(c, Winv * c)]]).tocsc()
                try:
                    mu = np.atleast_1d(spla.spsolve(M, np.append(bF, bc)))
                except RuntimeError:
                    return None
            else:
                schur = float(np.dot(c, Winv * c) - np.dot(v, Av))
                if not schur > 0:
                    return None
                nu = (bc - np.dot(v, Ab)) / schur
                mu = np.append(Ab - Av * nu, nu)
        else:
            mu = np.array([bc / np.dot(c, Winv * c)])
        if not np.all(np.isfinite(mu)):
            return None
        phi = rhs_phi - Winv * (DF.T @ mu[:-1] + c * mu[-1])
        s = np.zeros(self.D.shape[0])
        s[S] = sigma
        s[F] = mu[:-1] / (lam_n * self.rownorm[F])
        return phi, s, mu[-1], F

    def polish(self, z: np.ndarray, lam_n: float, max_steps: int = 50):
        """Active-set refinement seeded with the pattern of ``z``.

        Returns ``(phi, s, nu)`` once the multipliers form a valid subgradient,
        or None.
        """
        S = np.flatnonzero(z)
        sigma = np.sign(z[S])
        seen = set()
        for _ in range(max_steps):
            key = (S.tobytes(), sigma.tobytes())
            if key in seen:
                return None
            seen.add(key)
            res = self._solve_pattern(S, sigma, lam_n)
            if res is None:
                return None
            phi, s, nu, F = res
            Dphi = self.D @ phi
            tiny = 1e-10 * max(np.abs(Dphi).max(initial=0.0), 1e-300)
            add = F[np.abs(s[F]) > 1.0 + 1e-9]
            drop = S[sigma * Dphi[S] < -tiny]
            if add.size == 0 and drop.size == 0:
                return phi, np.clip(s, -1.0, 1.0), nu
            sign_all = np.zeros(self.D.shape[0])
            sign_all[S] = sigma
            sign_all[add] = np.sign(s[add])
            sign_all[drop] = 0.0
            S = np.flatnonzero(sign_all)
            sigma = sign_all[S]
        return None

    def dual_ipm(self, lam_n: float, gap_tol: float = 1e-13, max_iter: int = 200):
        """Primal-dual interior point on the box-constrained dual.

        Works with row-normalized ``D`` so the dual variable for row ``e`` is
        boxed by ``lam_n * ||D_e||``. Returns the dual point in the original
        scaling (``|s| <= 1``); accuracy is whatever the barrier reaches, so
        the caller hands the result to :meth:`polish`.
        """
        D, a, Dn = self.D, self.rownorm, self.Dn
        DnT = Dn.T.tocsr()
        Winv = 1.0 / (2.0 * self.Wn)
        c = self.counts
        gamma = float(np.dot(c, Winv * c))
        A = (Dn @ sp.diags(Winv) @ DnT).tocsr()
        b = Dn @ (Winv * c)
        U = lam_n * a
        nz = U.size

        def primal(w):
            h = DnT @ w
            nu = np.dot(c, self.ybar - Winv * h) / gamma
            g = h + nu * c
            return self.ybar - Winv * g, g

        def gap_of(w):
            phi, g = primal(w)
            pobj = float(np.dot(self.Wn, (phi - self.ybar) ** 2)) + lam_n * float(np.abs(D @ phi).sum())
            dobj = float(np.dot(g, self.ybar) - 0.5 * np.dot(g, Winv * g))
            return phi, pobj - dobj, max(abs(pobj), abs(dobj), 1e-300)

        w = np.zeros(nz)
        mu1 = np.ones(nz)
        mu2 = np.ones(nz)
        t, step = 1e-10, math.inf
        for _ in range(max_iter):
            phi, gap, scale = gap_of(w)
            if gap <= gap_tol * scale:
                break
            if step >= 0.2:
                t = max(2.0 * 2.0 * nz / max(gap, 1e-300), 1.2 * t)
            f1, f2 = w - U, -w - U
            grad = -(Dn @ phi)
            diag = mu1 / (-f1) + mu2 / (-f2)
            M = A + sp.diags(diag)
            try:
                cb = sla.cholesky_banded(_upper_banded(M, self.op.k), lower=False)
                sol = lambda v: sla.cho_solve_banded((cb, False), v)  # noqa: E731
            except np.linalg.LinAlgError:
                sol = spla.splu(M.tocsc()).solve
            r = -grad + (1.0 / t) / f1 - (1.0 / t) / f2
            Mr, Mb = sol(r), sol(b)
            den = gamma - np.dot(b, Mb)
            if den <= 0:
                break
            dw = Mr + Mb * (np.dot(b, Mr) / den)
            dmu1 = -(mu1 + ((1.0 / t) + dw * mu1) / f1)
            dmu2 = -(mu2 + ((1.0 / t) - dw * mu2) / f2)

            def residual(w_, m1, m2):
                p_, _ = primal(w_)
                rd = -(Dn @ p_) + m1 - m2
                rc = np.concatenate((-m1 * (w_ - U), -m2 * (-w_ - U))) - 1.0 / t
                return math.sqrt(float(np.dot(rd, rd) + np.dot(rc, rc)))

            res0 = residual(w, mu1, mu2)
            neg = np.concatenate((dmu1, dmu2)) < 0
            mus = np.concatenate((mu1, mu2))
            dmus = np.concatenate((dmu1, dmu2))
            step = min(1.0, 0.99 * float(np.min(-mus[neg] / dmus[neg]))) if neg.any() else 1.0
            for _ls in range(60):
                nw = w + step * dw
                if np.all(nw < U) and np.all(nw > -U):
                    n1, n2 = mu1 + step * dmu1, mu2 + step * dmu2
                    if residual(nw, n1, n2) <= (1.0 - 0.01 * step) * res0:
                        break
                step *= 0.5
            else:
                break
            if step < 1e-12:
                break
            w, mu1, mu2 = nw, n1, n2
        return w / U

    def kkt(self, phi: np.ndarray, s: np.ndarray, nu: float, lam_n: float) -> float:
        grad = 2.0 * self.Wn * (phi - self.ybar) + lam_n * (self.DT @ s) + nu * self.counts
        scale = max(np.abs(2.0 * self.Wn * self.ybar).max(), np.abs(nu * self.counts).max(), 1e-300)
        return float(np.abs(grad).max() / scale)

    def make_fit(self, phi: np.ndarray, lam: float, **diag) -> TfFit:
        phi = np.asarray(phi, dtype=float)
        return TfFit(
            k=self.op.k,
            lam=float(lam),
            fitted=phi[self.op.group],
            phi=phi,
            positions=self.op.positions,
            tv_value=self.tv(phi),
            **diag,
        )

    # -- ADMM --------------------------------------------------------------
    def solve(self, lam: float, opts: TfOptions, warm: dict | None = None) -> tuple[TfFit, dict]:
        if lam < 0:
            raise ValueError("lambda must be >= 0")
        if lam == 0:
            phi = self.centered_wls()
            return self.make_fit(phi, 0.0), {}
        lam_n = lam / self.wscale
        q, nz = self.op.q, self.D.shape[0]
        if warm is not None:
            z, u, rho = warm["z"].copy(), warm["u"].copy(), warm["rho"] * 1.0
            u *= lam_n / warm["lam_n"] if warm["lam_n"] > 0 else 1.0
        else:
            z, u = np.zeros(nz), np.zeros(nz)
            rho = opts.rho0 if opts.rho0 is not None else lam_n

        def factor(r):
            try:
                cb = sla.cholesky_banded(self.banded(r), lower=False)
                solve = lambda b: sla.cho_solve_banded((cb, False), b)  # noqa: E731
            except np.linalg.LinAlgError:
                # Near-coincident positions make D^(k) badly scaled for k >= 2.
                lu = spla.splu((self.DtPD * r + sp.diags(2.0 * self.Wn)).tocsc())
                solve = lu.solve
            Ac = solve(self.counts)
            return solve, Ac, float(np.dot(self.counts, Ac))

        solve, Ac, cAc = factor(rho)
        objective = lambda p: self.loss(p) + lam * self.tv(p)  # noqa: E731
        best = math.inf
        history = {"objective": [], "r_norm": [], "s_norm": [], "rho": []}
        tried_support = None
        next_polish, failures = opts.polish_every, 0
        r_norm = s_norm = math.inf

        def certify(res, it):
            if res is None:
                return None
            p_phi, p_s, p_nu = res
            kkt = self.kkt(p_phi, p_s, p_nu, lam_n)
            if kkt > opts.tol:
                return None
            history["objective"].append(min(best, objective(p_phi)))
            state = {"z": np.where(np.abs(p_s) < 1.0, 0.0, self.D @ p_phi),
                     "u": p_s * lam_n / (rho * self.p), "rho": rho, "lam_n": lam_n}
            fit = self.make_fit(
                p_phi, lam, iterations=it, r_norm=r_norm, s_norm=s_norm,
                kkt_residual=kkt, objective_history=history["objective"],
            )
            return fit, state

        for it in range(1, opts.max_iter + 1):
            b = 2.0 * self.Wn * self.ybar + rho * (self.DT @ (self.p * (z - u)))
            x = solve(b)
            phi = x - (np.dot(self.counts, x) / cAc) * Ac
            Dphi = self.D @ phi
            z_old = z
            z = _soft(Dphi + u, lam_n / (rho * self.p))
            u = u + Dphi - z
            r = Dphi - z
            r_norm = float(np.linalg.norm(np.sqrt(self.p) * r))
            s_norm = float(rho * np.linalg.norm(self.DT @ (self.p * (z - z_old))))
            best = min(best, objective(phi))
            history["objective"].append(best)
            history["r_norm"].append(r_norm)
            history["s_norm"].append(s_norm)
            history["rho"].append(rho)

            if it >= next_polish:
                support = z != 0
                if tried_support is None or not np.array_equal(support, tried_support):
                    tried_support = support
                    res = self.polish(z, lam_n)
                    failures += 1
                    next_polish = it + opts.polish_every * 2 ** min(failures, 6)
                    done = certify(res, it)
                    if done is not None:
                        return done

            if it == opts.fallback_after and self.op.k >= 2:
                s_ipm = self.dual_ipm(lam_n)
                seed = np.where(np.abs(s_ipm) > 1.0 - 1e-6, np.sign(s_ipm), 0.0)
                done = certify(self.polish(seed, lam_n), it)
                if done is not None:
                    return done

            if r_norm > opts.mu * s_norm:
                factor_change = opts.tau_incr
            elif s_norm > opts.mu * r_norm:
                factor_change = 1.0 / opts.tau_decr
            else:
                factor_change = 1.0
            if factor_change != 1.0:
                rho *= factor_change
                u /= factor_change
                solve, Ac, cAc = factor(rho)
        raise TfConvergenceError(
            f"trend filtering (k={self.op.k}, lambda={lam:g}) not certified after "
            f"{opts.max_iter} iterations (r={r_norm:.3g}, s={s_norm:.3g})",
            history,
        )


def fit_penalized_tf(
    dataset: TemporalSpatialDataset, k: int, lam: float, opts: TfOptions | None = None
) -> TfFit:
    """Penalized trend filtering of order ``k`` with the zero-sum constraint."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    opts = opts or TfOptions()
    fit, _ = _TfProblem(dataset, k).solve(lam, opts)
    return fit


def fit_constrained_tf(
    dataset: TemporalSpatialDataset, k: int, budget: float, opts: TfOptions | None = None
) -> TfFit:
    """Loss minimizer subject to ``||D^(k) phi||_1 <= budget`` and zero sum.

    Realized by geometric bisection on the penalty, using that the fitted
    total variation is non-increasing in lambda; the returned fit has
    ``budget <= tv_value <= budget * (1 + opts.bisect_slack)``.
    """
    if budget <= 0:
        raise ValueError("TV budget must be positive")
    opts = opts or TfOptions()
    prob = _TfProblem(dataset, k)
    slack = opts.bisect_slack
    fit0, _ = prob.solve(0.0, opts)
    if fit0.tv_value <= budget:
        return fit0

    # Accept from above: along the penalty path the loss falls as the TV
    # rises, so a fit just over the budget is at least as good as any
    # feasible one.
    def ok(f: TfFit) -> bool:
        return budget <= f.tv_value <= budget * (1 + slack)

    lam = prob.wscale
    fit, warm = prob.solve(lam, opts)
    lo = hi = None
    fit_hi = None
    for _ in range(opts.max_bisect):
        if ok(fit):
            return fit
        if fit.tv_value > budget:
            lo = lam
            if hi is None:
                lam *= 4.0
        else:
            hi, fit_hi = lam, fit
            if lo is None:
                lam /= 4.0
        if lo is not None and hi is not None:
            if hi / lo - 1.0 < 1e-12:
                return fit_hi
            lam = math.sqrt(lo * hi)
        fit, warm = prob.solve(lam, opts, warm)
    raise TfConvergenceError(
        f"bisection on lambda did not meet TV budget {budget:g} within {opts.max_bisect} steps",
        {"lo": lo, "hi": hi},
    )


def evaluate_tf(fit: TfFit, x_new) -> np.ndarray:
    """Evaluate a fit off the design.

    ``k = 1``: value at the nearest design position, taking the left one at
    exact midpoints. ``k >= 2``: degree ``k-1`` interpolating spline through
    ``(positions, phi)``; natural boundary conditions where scipy supports
    them (linear and cubic).
    """
    x_new = np.atleast_1d(np.asarray(x_new, dtype=float))
    if np.any(x_new < 0) or np.any(x_new > 1) or not np.all(np.isfinite(x_new)):
        raise ValueError("evaluation points must lie in [0, 1]")
    t, phi = fit.positions, fit.phi
    if fit.k == 1 or t.size == 1:
        right = np.clip(np.searchsorted(t, x_new, side="left"), 0, t.size - 1)
        left = np.clip(right - 1, 0, t.size - 1)
        take_left = (x_new - t[left]) <= (t[right] - x_new)
        return np.where(take_left, phi[left], phi[right])
    deg = fit.k - 1
    if deg == 1:
        return np.interp(x_new, t, phi)
    deg = min(deg, t.size - 1)
    bc = "natural" if deg == 3 else None
    return make_interp_spline(t, phi, k=deg, bc_type=bc)(x_new)


def tf_kkt_residual(dataset: TemporalSpatialDataset, fit: TfFit, zero_tol: float = 1e-9) -> float:
    """Relative KKT residual of a fit, by explicit subgradient construction.

    Entries of ``D phi`` above ``zero_tol`` (relative) get ``s = sign``; the
    remaining ``s`` in ``[-1, 1]`` and the constraint multiplier are chosen by
    bounded least squares. Independent of the solver's own multipliers;
    intended for small and moderate problems.
    """
    prob = _TfProblem(dataset, fit.k)
    phi = fit.phi
    g = 2.0 * prob.W * (phi - prob.ybar)
    Dphi = prob.D @ phi
    # Row-relative zero test: rows of D^(k) differ in size by many orders.
    row_l1 = np.asarray(np.abs(prob.D).sum(axis=1)).ravel()
    S = np.abs(Dphi) > zero_tol * row_l1 * max(np.abs(phi).max(), 1e-300)
    F = ~S
    base = g + fit.lam * (prob.DT[:, S] @ np.sign(Dphi[S])) if S.any() else g
    A = np.hstack([fit.lam * prob.DT[:, F].toarray(), prob.counts[:, None]])
    nF = int(F.sum())
    lb = np.concatenate([-np.ones(nF), [-np.inf]])
    ub = np.concatenate([np.ones(nF), [np.inf]])
    sol = lsq_linear(A, -base, bounds=(lb, ub), method="bvls", tol=1e-14)
    resid = base + A @ sol.x
    ref = max(np.abs(2.0 * prob.W * prob.ybar).max(), 1e-300)
    return float(np.abs(resid).max() / ref)
