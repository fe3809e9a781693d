"""Model selection, error metrics, rate studies and lattice-embedding diagnostics."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .core import TemporalSpatialDataset, check_aligned
from .gfl import AdmmOptions, FitResult, fit_penalized_knnfl, predict_knn_average
from .knn_graph import KnnGraph, build_knn_graph, graph_tv
from .simgen import ScenarioConfig, generate
from .tf1d import TfFit, TfOptions, evaluate_tf, fit_penalized_tf

__all__ = [
    "CvPlan",
    "CvResult",
    "TrendFilterMethod",
    "KnnFusedLassoMethod",
    "make_split",
    "fold_labels",
    "kfold_select",
    "mse",
    "lambda_grid",
    "default_lambda_grid",
    "RateFit",
    "rate_slope",
    "RateStudy",
    "run_rate_study",
    "LatticeEmbedding",
    "recommended_lattice_size",
    "lattice_embed",
    "embedding_diagnostics",
]

# Stream keys for partitions, disjoint from the generator's components.
_SPLIT, _FOLDS, _BOOT, _REPLICATE = 10, 11, 12, 13


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


def _derived_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(_REPLICATE,) + key).generate_state(1)[0])


# -- metrics -----------------------------------------------------------------

def mse(fitted, truth, weights) -> float:
    """Weighted mean squared error ``sum_k w_k (truth_k - fitted_k)^2``.

    With the dataset weights ``1 / (n m_i)`` this is the ragged per-time
    average ``(1/n) sum_i (1/m_i) sum_j (truth - fitted)^2``.
    """
    f, t, w = (np.asarray(a, dtype=float) for a in (fitted, truth, weights))
    if not (f.shape == t.shape == w.shape):
        raise ValueError("fitted, truth and weights must have the same shape")
    return float(np.dot(w, (t - f) ** 2))


# -- cross-validation --------------------------------------------------------

@dataclass(frozen=True)
class CvPlan:
    folds: int = 5
    test_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("need at least 2 folds")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")


def make_split(size: int, plan: CvPlan) -> tuple[np.ndarray, np.ndarray]:
    """Sorted 0-based (train, test) flat indices; depends only on ``size`` and the seed."""
    perm = _rng(plan.seed, _SPLIT).permutation(size)
    n_test = int(round(plan.test_fraction * size))
    if n_test < 1 or n_test >= size:
        raise ValueError(f"cannot split {size} points with test fraction {plan.test_fraction}")
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def fold_labels(size: int, plan: CvPlan) -> np.ndarray:
    """Fold label in ``0..folds-1`` for each of ``size`` entries (balanced, shuffled)."""
    if size < plan.folds:
        raise ValueError(f"{size} points cannot fill {plan.folds} folds")
    labels = np.empty(size, dtype=np.int64)
    labels[_rng(plan.seed, _FOLDS).permutation(size)] = np.arange(size) % plan.folds
    return labels


class TrendFilterMethod:
    """Penalized trend filtering; held-out points use :func:`evaluate_tf`."""

    def __init__(self, k: int = 1, opts: TfOptions | None = None):
        self.k = k
        self.opts = opts or TfOptions()

    def prepare(self, ds: TemporalSpatialDataset):
        return ds

    def fit(self, prepared, lam: float, warm=None) -> tuple[TfFit, None]:
        return fit_penalized_tf(prepared, self.k, lam, self.opts), None

    def predict(self, prepared, fit: TfFit, x: np.ndarray) -> np.ndarray:
        return evaluate_tf(fit, np.asarray(x)[:, 0])

    @staticmethod
    def fitted(fit: TfFit) -> np.ndarray:
        return fit.fitted


class KnnFusedLassoMethod:
    """Penalized K-NN fused lasso; held-out points use the K-NN average."""

    def __init__(self, K: int = 5, opts: AdmmOptions | None = None):
        self.K = K
        self.opts = opts or AdmmOptions()

    def prepare(self, ds: TemporalSpatialDataset):
        return ds, build_knn_graph(ds.x, self.K)

    def fit(self, prepared, lam: float, warm=None) -> tuple[FitResult, object]:
        ds, g = prepared
        res = fit_penalized_knnfl(ds, g, lam, self.opts, warm=warm)
        return res, res.state

    def predict(self, prepared, fit: FitResult, x: np.ndarray) -> np.ndarray:
        ds, _ = prepared
        return predict_knn_average(x, ds, fit.fitted, self.K)

    @staticmethod
    def fitted(fit: FitResult) -> np.ndarray:
        return fit.fitted


@dataclass
class CvResult:
    selected: float
    grid: np.ndarray
    curve: np.ndarray
    fold_mse: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "selected": self.selected,
            "grid": self.grid.tolist(),
            "curve": self.curve.tolist(),
            "fold_mse": self.fold_mse.tolist(),
        }


def _fold_path(args):
    method, train, held, grid_desc = args
    prep = method.prepare(train)
    warm = None
    out = np.empty(grid_desc.size)
    w = held.weights()
    for r, lam in enumerate(grid_desc):
        fit, warm = method.fit(prep, float(lam), warm)
        out[r] = mse(method.predict(prep, fit, held.x), held.y, w)
    return out


def kfold_select(dataset: TemporalSpatialDataset, method, grid: Sequence[float],
                 plan: CvPlan | None = None, jobs: int = 1) -> CvResult:
    """Select the penalty minimizing the mean held-out error over the folds.

    The grid is walked from large to small penalty within each fold so that
    every fit can warm-start from the previous one. Held-out error is the
    ragged-weighted MSE of the predictions against the observed responses.
    Exact ties go to the smaller penalty.
    """
    plan = plan or CvPlan()
    grid = np.unique(np.asarray(grid, dtype=float))
    if grid.size == 0:
        raise ValueError("grid must be non-empty")
    if np.any(grid < 0):
        raise ValueError("penalties must be non-negative")
    labels = fold_labels(dataset.size, plan)
    tasks = []
    for f in range(plan.folds):
        tr = np.flatnonzero(labels != f)
        ho = np.flatnonzero(labels == f)
        if tr.size == 0 or ho.size == 0:
            raise ValueError(f"fold {f} has an empty training or held-out set")
        tasks.append((method, dataset.subset(tr)[0], dataset.subset(ho)[0], grid[::-1]))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            paths = list(ex.map(_fold_path, tasks))
    else:
        paths = [_fold_path(t) for t in tasks]
    fold_mse = np.array(paths)[:, ::-1]
    curve = fold_mse.mean(axis=0)
    best = int(np.flatnonzero(curve == curve.min())[0])
    return CvResult(float(grid[best]), grid, curve, fold_mse)


def lambda_grid(center: float, count: int = 7, span: float = 2.0) -> np.ndarray:
    """``count`` log-spaced values spanning ``span`` decades around ``center``."""
    if center <= 0 or count < 1:
        raise ValueError("center must be positive and count >= 1")
    if count == 1:
        return np.array([center])
    return center * np.logspace(-span / 2, span / 2, count)


def default_lambda_grid(method: str, size: int, count: int | None = None,
                        span: float | None = None) -> np.ndarray:
    """Grid centred on a size-scaled penalty.

    The center follows the usual tuning rates, ``size^(-2/3)`` for first-order
    trend filtering and ``1/size`` for the K-NN fused lasso, with constants
    calibrated on the simulation scenarios. K-NN fused lasso fits are the
    expensive ones, so their default grid is shorter.
    """
    if method == "tf":
        center, dc, ds = 20.0 * size ** (-2.0 / 3.0), 7, 2.0
    elif method == "knnfl":
        center, dc, ds = 15.0 / size, 5, 1.0
    else:
        raise ValueError(f"unknown method {method!r}")
    return lambda_grid(center, dc if count is None else count, ds if span is None else span)


# -- rates -------------------------------------------------------------------

@dataclass
class RateFit:
    slope: float
    intercept: float
    ci: tuple[float, float] | None


def _ols_slope(lx: np.ndarray, ly: np.ndarray) -> tuple[float, float]:
    A = np.column_stack([lx, np.ones_like(lx)])
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    return float(coef[0]), float(coef[1])


def rate_slope(sizes, mse_medians, replicate_mse=None, n_boot: int = 2000,
               level: float = 0.95, seed: int = 0) -> RateFit:
    """Least-squares slope of ``log(median MSE)`` on ``log(nm)``.

    ``sizes`` holds ``(n, m)`` pairs or total sample sizes. With
    ``replicate_mse`` (one sequence of replicate errors per size) a percentile
    bootstrap interval is formed by resampling replicates within each size.
    """
    nm = np.array([float(s[0]) * float(s[1]) if np.ndim(s) else float(s) for s in sizes])
    med = np.asarray(mse_medians, dtype=float)
    if nm.size < 3:
        raise ValueError("need at least 3 sizes for a slope")
    if med.shape != nm.shape:
        raise ValueError("one median per size is required")
    if np.any(nm <= 0) or np.any(med <= 0):
        raise ValueError("sizes and MSE values must be positive")
    lx = np.log(nm)
    slope, icpt = _ols_slope(lx, np.log(med))
    ci = None
    if replicate_mse is not None:
        reps = [np.asarray(r, dtype=float) for r in replicate_mse]
        if len(reps) != nm.size:
            raise ValueError("one replicate list per size is required")
        rng = _rng(seed, _BOOT)
        boots = np.empty(n_boot)
        for b in range(n_boot):
            meds = [np.median(r[rng.integers(0, r.size, r.size)]) for r in reps]
            boots[b] = _ols_slope(lx, np.log(np.maximum(meds, 1e-300)))[0]
        a = (1.0 - level) / 2.0
        ci = (float(np.quantile(boots, a)), float(np.quantile(boots, 1.0 - a)))
    return RateFit(slope, icpt, ci)


@dataclass
class RateStudy:
    scenario_id: int
    n_values: list
    replicates: int
    method: str = "tf"
    k: int = 1
    K: int = 5
    m_mult: float = 1.0
    d: int = 1
    grid_count: int | None = None
    grid_span: float | None = None
    folds: int = 5
    seed: int = 0
    scenario_overrides: dict = field(default_factory=dict)


def _replicate(args) -> dict:
    study, size_idx, rep = args
    n = study.n_values[size_idx]
    seed = _derived_seed(study.seed, size_idx, rep)
    cfg = ScenarioConfig(study.scenario_id, n, study.m_mult, study.d, seed=seed,
                         **study.scenario_overrides)
    data = generate(cfg)
    ds = data.dataset
    plan = CvPlan(folds=study.folds, seed=seed)
    tr_idx, te_idx = make_split(ds.size, plan)
    train = ds.subset(tr_idx)[0]
    test = ds.subset(te_idx)[0]
    method = TrendFilterMethod(study.k) if study.method == "tf" else KnnFusedLassoMethod(study.K)
    grid = default_lambda_grid(study.method, train.size, study.grid_count, study.grid_span)
    cv = kfold_select(train, method, grid, plan)
    prep = method.prepare(train)
    fit, _ = method.fit(prep, cv.selected)
    pred = method.predict(prep, fit, test.x)
    return {
        "n": n,
        "size": ds.size,
        "replicate": rep,
        "seed": seed,
        "lambda": cv.selected,
        "mse": mse(pred, data.f_star[te_idx], test.weights()),
    }


def run_rate_study(study: RateStudy, jobs: int = 1) -> dict:
    """Generate, select by CV, refit and score on the held-out 25%.

    Test error is the ragged-weighted MSE against the noiseless truth. Returns
    a report with per-size medians and IQRs, the slope of median MSE against
    ``N_tot`` and the per-replicate rows.
    """
    if len(study.n_values) < 3:
        raise ValueError("a rate study needs at least 3 sizes")
    if study.replicates < 1:
        raise ValueError("replicates must be >= 1")
    tasks = [(study, s, r) for s in range(len(study.n_values)) for r in range(study.replicates)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            rows = list(ex.map(_replicate, tasks))
    else:
        rows = [_replicate(t) for t in tasks]
    per_size = []
    for s, n in enumerate(study.n_values):
        vals = np.array([r["mse"] for r in rows if r["n"] == n])
        size = next(r["size"] for r in rows if r["n"] == n)
        q1, med, q3 = np.quantile(vals, [0.25, 0.5, 0.75])
        per_size.append({"n": n, "size": size, "median_mse": float(med), "iqr": [float(q1), float(q3)]})
    medians = [p["median_mse"] for p in per_size]
    reps = [[r["mse"] for r in rows if r["n"] == n] for n in study.n_values]
    fit = rate_slope([p["size"] for p in per_size], medians, reps, seed=study.seed)
    return {
        "config": asdict(study),
        "per_size": per_size,
        "slope": fit.slope,
        "intercept": fit.intercept,
        "ci": list(fit.ci) if fit.ci else None,
        "rows": rows,
    }


# -- lattice embedding ---------------------------------------------------------

@dataclass
class LatticeEmbedding:
    """Cell-wise projection of a signal onto the ``N^d`` lattice.

    ``cell`` is the (row-major) cell of each design point, ``representative``
    the design point nearest each cell center (-1 for empty cells).
    ``incidence`` joins occupied cells whose centers are ``1/N`` apart.
    """

    N: int
    d: int
    cell: np.ndarray
    representative: np.ndarray
    theta_I: np.ndarray
    theta_sup_I: np.ndarray
    incidence: sp.csr_matrix = field(repr=False)

    def centers(self) -> np.ndarray:
        axes = (np.arange(1, self.N + 1) - 0.5) / self.N
        mesh = np.meshgrid(*([axes] * self.d), indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)

    @property
    def occupied(self) -> np.ndarray:
        return self.representative >= 0


def recommended_lattice_size(size: int, d: int, K: int) -> int:
    """``ceil(3 sqrt(d) (nm)^(1/d) / K^(1/d))``."""
    return int(math.ceil(3.0 * math.sqrt(d) * size ** (1.0 / d) / K ** (1.0 / d)))


def _cell_of(x: np.ndarray, N: int) -> np.ndarray:
    # Cells are [r/N, (r+1)/N) per axis; x = 1 belongs to the last one.
    return np.minimum(np.floor(x * N).astype(np.int64), N - 1)


def lattice_embed(theta, dataset: TemporalSpatialDataset, N: int) -> LatticeEmbedding:
    theta = check_aligned(theta, dataset, "theta")
    if N < 1:
        raise ValueError("N must be >= 1")
    d = dataset.d
    if N ** d > 50_000_000:
        raise ValueError(f"lattice with {N}^{d} cells is too large")
    x = dataset.x
    sub = _cell_of(x, N)
    cell = np.ravel_multi_index(sub.T, (N,) * d)
    dist = np.sum((x - (sub + 0.5) / N) ** 2, axis=1)
    # Lexicographic (cell, distance, flat index): first of each cell wins.
    order = np.lexsort((np.arange(x.shape[0]), dist, cell))
    first = order[np.r_[True, cell[order][1:] != cell[order][:-1]]]
    rep = np.full(N ** d, -1, dtype=np.int64)
    rep[cell[first]] = first
    sup = np.zeros(N ** d)
    sup[cell[first]] = theta[first]
    theta_I = theta[rep[cell]]
    # Grid edges between occupied neighbours along each axis.
    occ = rep >= 0
    idx = np.arange(N ** d).reshape((N,) * d)
    us, vs = [], []
    for ax in range(d):
        a = np.take(idx, np.arange(N - 1), axis=ax).ravel()
        b = np.take(idx, np.arange(1, N), axis=ax).ravel()
        keep = occ[a] & occ[b]
        us.append(a[keep])
        vs.append(b[keep])
    u, v = np.concatenate(us), np.concatenate(vs)
    E = u.size
    inc = sp.csr_matrix(
        (np.tile([1.0, -1.0], E), (np.repeat(np.arange(E), 2), np.column_stack((u, v)).ravel())),
        shape=(E, N ** d),
    )
    return LatticeEmbedding(N, d, cell, rep, theta_I, sup, inc)


def embedding_diagnostics(theta, dataset: TemporalSpatialDataset, g: KnnGraph,
                          N: int | None = None) -> dict:
    """Both sides of the l2 and TV embedding inequalities and whether they hold."""
    theta = check_aligned(theta, dataset, "theta")
    if N is None:
        N = recommended_lattice_size(dataset.size, dataset.d, g.K)
    emb = lattice_embed(theta, dataset, N)
    # Correctly rounded sums keep the subset comparison exact.
    l2_sup = math.sqrt(math.fsum(emb.theta_sup_I ** 2))
    l2 = math.sqrt(math.fsum(theta ** 2))
    tv_lat = float(np.abs(emb.incidence @ emb.theta_sup_I).sum())
    tv_knn = graph_tv(theta, g)
    return {
        "N": N,
        "K": g.K,
        "occupied_cells": int(emb.occupied.sum()),
        "cells": N ** dataset.d,
        "l2_embedded": l2_sup,
        "l2_signal": l2,
        "l2_holds": bool(l2_sup <= l2),
        "tv_lattice": tv_lat,
        "tv_knn": tv_knn,
        "tv_holds": bool(tv_lat <= tv_knn),
    }
