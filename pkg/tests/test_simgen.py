import json
import math

import numpy as np
import pytest
from scipy.integrate import quad

from oracles import replay_coefficients
from tempspat.core import read_dataset_csv
from tempspat.simgen import (
    ScenarioConfig,
    centering_constant,
    gen_design,
    gen_measurement_error,
    gen_spatial_noise,
    generate,
    mi_schedule,
    scenario_truth,
    sine_basis,
    sine_basis_matrix,
    write_generated,
)


def test_schedules():
    assert list(mi_schedule(8, 1)) == [30, 30, 10, 10, 40, 40, 20, 20]
    assert list(mi_schedule(4, 0.5)) == [25, 5, 35, 15]
    assert list(mi_schedule(4, 2)) == [40, 20, 50, 30]
    with pytest.raises(ValueError):
        mi_schedule(6, 1)
    with pytest.raises(ValueError):
        mi_schedule(4, 0.25)


def test_design_phi_extremes():
    m = np.full(6, 5)
    x, carried = gen_design(6, m, 2, 0.0, seed=1)
    assert not carried.any()
    assert len({tuple(r) for r in x}) == 30
    x, carried = gen_design(6, m, 2, 1.0, seed=1)
    blocks = x.reshape(6, 5, 2)
    for i in range(1, 6):
        np.testing.assert_array_equal(blocks[i], blocks[0])
    assert carried.sum() == 25


def test_design_carry_fraction():
    m = np.full(1000, 10)
    x, carried = gen_design(1000, m, 1, 0.1, seed=3)
    frac = carried[10:].mean()
    assert abs(frac - 0.1) <= 0.02
    assert np.all((x >= 0) & (x < 1))


def test_design_ragged_carry_only_where_previous_exists():
    m = np.array([2, 5, 3, 3])
    _, carried = gen_design(4, m, 1, 1.0, seed=0)
    # Time 2 can only inherit its first two points.
    np.testing.assert_array_equal(carried[2:7], [True, True, False, False, False])
    np.testing.assert_array_equal(carried[7:10], [True, True, True])


def _h(t, xs):
    out = 1.0
    for v in xs:
        out *= math.pi / math.sqrt(2.0) * math.sin(t * v)
    return out


def test_sine_basis_values():
    assert sine_basis(3, [0.0, 0.7]) == 0.0
    assert sine_basis(1, 0.5) == pytest.approx(_h(1, [0.5]), rel=1e-14)
    assert sine_basis(1, 0.5) == pytest.approx(1.0650158, abs=1e-7)
    assert sine_basis(2, [0.25, 0.25]) == pytest.approx(_h(2, [0.25, 0.25]), rel=1e-14)
    rng = np.random.default_rng(0)
    pts = rng.random((7, 3))
    H = sine_basis_matrix(pts, 5)
    for a in range(7):
        for t in range(1, 6):
            assert H[a, t - 1] == pytest.approx(_h(t, pts[a]), rel=1e-13)
    with pytest.raises(ValueError):
        sine_basis(0, 0.3)


def test_spatial_noise_zero_scale():
    cfg = ScenarioConfig(1, 4, b_sd=0.0)
    m = mi_schedule(4, 1)
    x, _ = gen_design(4, m, 1, 0.1, 0)
    delta, coef = gen_spatial_noise(x, m, cfg)
    assert np.all(delta == 0) and np.all(coef == 0)


def test_spatial_noise_single_term():
    cfg = ScenarioConfig(1, 4, basis_count=1, seed=2)
    m = mi_schedule(4, 1)
    x, _ = gen_design(4, m, 1, 0.1, 2)
    delta, coef = gen_spatial_noise(x, m, cfg)
    b1 = coef[0, 0]
    np.testing.assert_allclose(delta[: m[0]], b1 * np.array([_h(1, [v]) for v in x[: m[0], 0]]), rtol=1e-13)


def test_coefficient_recursion_replay():
    cfg = ScenarioConfig(1, 100, basis_count=7, b_sd=2.0, seed=9)
    m = mi_schedule(100, 1)
    x, _ = gen_design(100, m, 1, 0.1, 9)
    _, coef = gen_spatial_noise(x, m, cfg)
    want = replay_coefficients(9, 100, 7, 2.0, 0.5)
    np.testing.assert_array_equal(coef, want)


def test_measurement_error_statistics():
    cfg = ScenarioConfig(1, 4, xi_var=0.5, seed=4)
    M = cfg.M
    e = gen_measurement_error(5000, np.full(5000, M), cfg).reshape(5000, M)
    burn = e[100:]
    lag1 = [np.corrcoef(burn[:-1, c], burn[1:, c])[0, 1] for c in range(M)]
    assert abs(lag1[0] - 0.3) <= 0.03
    assert abs(np.mean(lag1) - 0.3) <= 0.03
    stat = 0.5 / (1 - 0.09)
    assert abs(burn[:, 0].var() / stat - 1) <= 0.1
    assert abs(burn.var() / stat - 1) <= 0.1


def test_measurement_error_zero_and_truncation():
    cfg = ScenarioConfig(1, 4, xi_var=0.0)
    assert np.all(gen_measurement_error(4, mi_schedule(4, 1), cfg) == 0)
    cfg = ScenarioConfig(1, 4, seed=5)
    m = np.array([3, 1, 2, 4])
    full = gen_measurement_error(4, np.full(4, cfg.M), cfg).reshape(4, cfg.M)
    got = gen_measurement_error(4, m, cfg)
    np.testing.assert_array_equal(got, np.concatenate([full[i, : m[i]] for i in range(4)]))
    with pytest.raises(ValueError):
        gen_measurement_error(4, np.array([1, 1, 1, cfg.M + 1]), cfg)


def test_scenario_examples():
    assert centering_constant(1) == pytest.approx(3.4, abs=1e-12)
    assert scenario_truth(1, 1, 0.1) == pytest.approx(1.6, abs=1e-12)
    assert scenario_truth(5, 2, [0.9, 0.9]) == 1.0
    assert scenario_truth(5, 2, [0.5, 0.5]) == 0.0
    assert scenario_truth(6, 2, [0.5, 0.5]) == 1.0
    assert scenario_truth(6, 2, [0.6, 0.5]) == 0.0
    assert scenario_truth(7, 3, [0.25] * 3) == 1.0
    assert scenario_truth(7, 3, [0.75] * 3) == -1.0
    assert scenario_truth(8, 2, [0.25, 0.5]) == 2.0
    assert scenario_truth(8, 2, [0.5, 0.25]) == 1.0
    assert scenario_truth(8, 2, [0.75, 0.5]) == 0.0
    assert scenario_truth(8, 2, [0.5, 0.75]) == -1.0


@pytest.mark.parametrize("sid", [1, 2, 3, 4])
def test_univariate_truth_is_centered(sid):
    f = lambda t: scenario_truth(sid, 1, t)  # noqa: E731
    breaks = {1: [0.2, 0.4, 0.6], 2: [0.4, 0.6, 0.8]}.get(sid)
    val, _ = quad(f, 0, 1, points=breaks, limit=500, epsabs=1e-12)
    assert abs(val) <= 1e-8


def test_incompatible_dimension_rejected():
    for sid, d in [(1, 2), (5, 3), (6, 1), (7, 1), (8, 1)]:
        with pytest.raises(ValueError):
            scenario_truth(sid, d, np.full(d, 0.3))
        with pytest.raises(ValueError):
            ScenarioConfig(sid, 4, d=d)


def test_config_validation():
    for kw in [dict(n=6), dict(phi=1.5), dict(b_sd=-1.0), dict(m_mult=0.33), dict(ar_eps=1.0)]:
        with pytest.raises(ValueError):
            ScenarioConfig(1, **{"n": 4, **kw})


@pytest.mark.parametrize("sid,d", [(1, 1), (2, 1), (3, 1), (4, 1), (5, 2), (6, 2), (7, 3), (8, 2)])
def test_generate_decomposition_and_determinism(sid, d):
    cfg = ScenarioConfig(sid, 8, d=d, seed=11)
    a = generate(cfg)
    b = generate(cfg)
    np.testing.assert_array_equal(a.dataset.y, a.f_star + a.delta + a.eps)
    np.testing.assert_array_equal(a.dataset.y, b.dataset.y)
    np.testing.assert_array_equal(a.dataset.x, b.dataset.x)
    np.testing.assert_array_equal(a.f_star, scenario_truth(sid, d, a.dataset.x))
    assert np.all(np.isfinite(a.dataset.y))


def test_noiseless_generation_returns_truth():
    d = generate(ScenarioConfig(2, 8, b_sd=0.0, xi_var=0.0, seed=3))
    np.testing.assert_array_equal(d.dataset.y, d.f_star)


def test_noise_has_zero_mean():
    vals = []
    for s in range(200):
        g = generate(ScenarioConfig(1, 4, seed=s, basis_count=10))
        vals.append(g.dataset.y[3] - g.f_star[3])
    vals = np.asarray(vals)
    assert abs(vals.mean()) <= 3 * vals.std(ddof=1) / math.sqrt(vals.size)


def test_written_files(tmp_path):
    data = generate(ScenarioConfig(5, 8, d=2, seed=7))
    write_generated(data, tmp_path / "d.csv", tmp_path / "t.json")
    ds = read_dataset_csv(tmp_path / "d.csv")
    np.testing.assert_array_equal(ds.y, data.dataset.y)
    side = json.loads((tmp_path / "t.json").read_text())
    assert side["config"]["scenario_id"] == 5
    np.testing.assert_array_equal(
        np.asarray(side["truth"]) + side["spatial_noise"] + np.asarray(side["measurement_error"]), ds.y)
    first = (tmp_path / "d.csv").read_bytes()
    write_generated(generate(ScenarioConfig(5, 8, d=2, seed=7)), tmp_path / "d.csv", tmp_path / "t.json")
    assert (tmp_path / "d.csv").read_bytes() == first
