import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tempspat.core import TemporalSpatialDataset
from tempspat.evaluation import (
    CvPlan,
    KnnFusedLassoMethod,
    TrendFilterMethod,
    default_lambda_grid,
    embedding_diagnostics,
    fold_labels,
    kfold_select,
    lambda_grid,
    lattice_embed,
    make_split,
    mse,
    rate_slope,
    recommended_lattice_size,
)
from tempspat.knn_graph import build_knn_graph
from tempspat.simgen import ScenarioConfig, generate
from tempspat.tf1d import fit_penalized_tf


def test_mse_examples():
    w = np.array([0.5, 0.25, 0.25])
    f = np.array([1.0, 2.0, 3.0])
    assert mse(f, f, w) == 0.0
    assert mse(f + 0.7, f, w) == pytest.approx(0.49)
    assert mse(np.zeros(3), np.array([1.0, 2.0, 2.0]), w) == pytest.approx(2.5)
    with pytest.raises(ValueError):
        mse(f, f[:2], w)


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_mse_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 9))
    w = rng.random(9)
    w /= w.sum()
    assert mse(a, b, w) == mse(b, a, w)


def test_split_and_folds_are_seeded_partitions():
    tr, te = make_split(100, CvPlan(seed=3))
    assert te.size == 25 and tr.size == 75
    assert np.array_equal(np.sort(np.r_[tr, te]), np.arange(100))
    tr2, te2 = make_split(100, CvPlan(seed=3))
    assert np.array_equal(te, te2)
    assert not np.array_equal(te, make_split(100, CvPlan(seed=4))[1])
    lab = fold_labels(52, CvPlan())
    counts = np.bincount(lab)
    assert counts.size == 5 and counts.max() - counts.min() <= 1
    assert np.array_equal(lab, fold_labels(52, CvPlan()))
    with pytest.raises(ValueError):
        fold_labels(3, CvPlan())


def _s1(seed=0, noiseless=False, n=40):
    kw = dict(b_sd=0.0, xi_var=0.0) if noiseless else {}
    return generate(ScenarioConfig(1, n, seed=seed, **kw)).dataset


def test_single_value_grid():
    ds = _s1()
    res = kfold_select(ds, TrendFilterMethod(1), [0.01])
    assert res.selected == 0.01
    assert res.fold_mse.shape == (5, 1)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_noiseless_scenario_prefers_small_lambda(seed):
    # Without noise the curve is flat near zero and rises sharply once
    # fusion starts erasing the jumps.
    ds = _s1(seed=seed, noiseless=True)
    grid = [1e-5, 1e-4, 1e-3, 1e-2, 1e-1]
    res = kfold_select(ds, TrendFilterMethod(1), grid)
    assert res.selected <= 1e-3
    assert res.curve[0] <= 1.05 * res.curve.min()
    assert res.curve[-1] > 2 * res.curve.min()
    assert np.all(np.diff(res.curve[2:]) > 0)


def test_grid_order_and_fold_order_do_not_matter():
    ds = _s1(seed=2, n=20)
    grid = [3e-3, 1e-1, 1e-2, 3e-2]
    a = kfold_select(ds, TrendFilterMethod(1), grid)
    b = kfold_select(ds, TrendFilterMethod(1), grid[::-1])
    assert a.selected == b.selected
    np.testing.assert_array_equal(a.curve, b.curve)
    np.testing.assert_allclose(a.fold_mse[::-1].mean(axis=0), a.curve, rtol=1e-15)


def test_knnfl_cv_runs_and_parallel_matches_serial():
    ds = generate(ScenarioConfig(5, 4, d=2, seed=1, m_mult=0.5)).dataset
    grid = default_lambda_grid("knnfl", ds.size, count=3)
    a = kfold_select(ds, KnnFusedLassoMethod(5), grid)
    b = kfold_select(ds, KnnFusedLassoMethod(5), grid, jobs=2)
    np.testing.assert_array_equal(a.curve, b.curve)
    assert a.selected in grid


def test_cv_errors():
    ds = _s1(n=4)
    with pytest.raises(ValueError):
        kfold_select(ds, TrendFilterMethod(1), [])
    with pytest.raises(ValueError):
        kfold_select(ds, TrendFilterMethod(1), [-1.0])


def test_lambda_grids():
    g = lambda_grid(0.1, 5, 2.0)
    assert g[2] == pytest.approx(0.1)
    assert g[-1] / g[0] == pytest.approx(100.0)
    assert lambda_grid(0.3, 1).tolist() == [0.3]
    assert default_lambda_grid("tf", 1000).size == 7
    with pytest.raises(ValueError):
        default_lambda_grid("ridge", 10)


def test_rate_slope_planted_laws():
    sizes = [(200, 25), (400, 25), (800, 25), (1600, 25)]
    nm = np.array([a * b for a, b in sizes], dtype=float)
    assert rate_slope(sizes, nm ** (-2 / 3)).slope == pytest.approx(-2 / 3, abs=1e-12)
    assert rate_slope(sizes, np.full(4, 0.3)).slope == pytest.approx(0.0, abs=1e-12)
    for a in (0.01, 7.0):
        assert rate_slope(nm, a * nm ** -0.5).slope == pytest.approx(-0.5, abs=1e-12)
    with pytest.raises(ValueError):
        rate_slope(nm[:2], nm[:2] ** -0.5)
    with pytest.raises(ValueError):
        rate_slope(nm, np.r_[0.0, 1.0, 1.0, 1.0])


def test_rate_slope_bootstrap_interval():
    rng = np.random.default_rng(0)
    nm = np.array([1e3, 2e3, 4e3, 8e3])
    reps = [nm_i ** -0.5 * np.exp(0.1 * rng.normal(size=20)) for nm_i in nm]
    fit = rate_slope(nm, [np.median(r) for r in reps], reps, n_boot=500)
    lo, hi = fit.ci
    assert lo <= fit.slope <= hi
    assert lo < -0.5 < hi


def _points(xs, d=1):
    xs = np.asarray(xs, dtype=float).reshape(-1, d)
    return TemporalSpatialDataset([xs.shape[0]], xs, np.zeros(xs.shape[0]))


def test_lattice_single_cell():
    ds = _points([[0.1, 0.2], [0.45, 0.55], [0.9, 0.9]], d=2)
    theta = np.array([1.0, 2.0, 3.0])
    emb = lattice_embed(theta, ds, 1)
    assert emb.theta_sup_I.tolist() == [2.0]
    assert emb.theta_I.tolist() == [2.0, 2.0, 2.0]


def test_lattice_two_cells():
    ds = _points([0.2, 0.8])
    theta = np.array([1.5, -0.5])
    emb = lattice_embed(theta, ds, 2)
    assert emb.theta_sup_I.tolist() == [1.5, -0.5]
    assert np.abs(emb.incidence @ emb.theta_sup_I).sum() == pytest.approx(2.0)
    np.testing.assert_array_equal(emb.centers().ravel(), [0.25, 0.75])


def test_lattice_boundary_and_ties():
    # x = 1 sits in the last cell; equidistant points resolve to the smaller index.
    ds = _points([1.0, 0.6, 0.9])
    emb = lattice_embed(np.array([1.0, 2.0, 3.0]), ds, 2)
    assert emb.cell.tolist() == [1, 1, 1]
    assert emb.representative.tolist() == [-1, 1]
    ds = _points([0.3, 0.2])
    assert lattice_embed(np.array([5.0, 6.0]), ds, 2).representative[0] == 0


def test_constant_signal_embeds_flat():
    data = generate(ScenarioConfig(5, 8, d=2, seed=0))
    ds = data.dataset
    g = build_knn_graph(ds.x, 5)
    theta = np.full(ds.size, 2.5)
    emb = lattice_embed(theta, ds, 6)
    np.testing.assert_array_equal(emb.theta_I, theta)
    rep = embedding_diagnostics(theta, ds, g, 6)
    assert rep["tv_lattice"] == 0.0 and rep["tv_knn"] == 0.0 and rep["tv_holds"]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 9))
def test_embedded_norm_never_exceeds_signal_norm(seed, d, N):
    rng = np.random.default_rng(seed)
    npts = int(rng.integers(1, 60))
    ds = _points(rng.random((npts, d)), d=d)
    theta = rng.normal(size=npts) * 10.0 ** rng.integers(-3, 4)
    g = build_knn_graph(ds.x, 1) if npts > 1 else None
    emb = lattice_embed(theta, ds, N)
    assert math.fsum(emb.theta_sup_I ** 2) <= math.fsum(theta ** 2)
    occ = emb.occupied
    assert occ.sum() == np.unique(emb.cell).size
    if g is not None:
        assert embedding_diagnostics(theta, ds, g, N)["l2_holds"]


def test_recommended_lattice_size():
    assert recommended_lattice_size(2000, 2, 20) == math.ceil(3 * math.sqrt(2) * math.sqrt(2000 / 20))
    assert recommended_lattice_size(100, 1, 5) == 60


def test_embedding_tv_inequality_on_scenario_truth():
    data = generate(ScenarioConfig(5, 40, d=2, seed=3))
    g = build_knn_graph(data.dataset.x, 20)
    rep = embedding_diagnostics(data.f_star, data.dataset, g)
    assert rep["N"] == recommended_lattice_size(data.dataset.size, 2, 20)
    assert rep["l2_holds"] and rep["tv_holds"]


def test_method_wrappers_agree_with_direct_fit():
    ds = _s1(seed=5, n=12)
    m = TrendFilterMethod(1)
    prep = m.prepare(ds)
    fit, _ = m.fit(prep, 0.01)
    np.testing.assert_array_equal(m.fitted(fit), fit_penalized_tf(ds, 1, 0.01).fitted)
