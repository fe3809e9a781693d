"""Synthetic temporal-spatial data: ragged schedules, carried-over designs,
autoregressive spatial noise on a sine basis and AR(1) measurement error.

Randomness comes from counter-based Philox streams. Every (component, time)
pair owns an independent stream derived from the configured seed::

    SeedSequence(seed, spawn_key=(component, i))

with components 0 = design, 1 = spatial-noise coefficients, 2 = measurement
error. Within a stream, draws for time ``i`` are consumed in a fixed order
(all ``j`` at once), so results do not depend on the platform or on how
many replicates run side by side.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.integrate import quad

from .core import TemporalSpatialDataset, write_dataset_csv

__all__ = [
    "ScenarioConfig",
    "GeneratedData",
    "mi_schedule",
    "stream",
    "gen_design",
    "sine_basis",
    "sine_basis_matrix",
    "gen_spatial_noise",
    "gen_measurement_error",
    "scenario_truth",
    "centering_constant",
    "generate",
    "write_generated",
]

DESIGN, SPATIAL, MEASUREMENT = 0, 1, 2

UNIVARIATE = (1, 2, 3, 4)


@dataclass(frozen=True)
class ScenarioConfig:
    scenario_id: int
    n: int
    m_mult: float = 1.0
    d: int = 1
    phi: float = 0.1
    basis_count: int = 50
    b_sd: float = 1.0
    xi_var: float = 0.5
    ar_delta: float = 0.5
    ar_eps: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.scenario_id not in range(1, 9):
            raise ValueError(f"scenario_id must be in 1..8, got {self.scenario_id}")
        _check_dim(self.scenario_id, self.d)
        if self.n < 4 or self.n % 4:
            raise ValueError(f"n must be a positive multiple of 4, got {self.n}")
        _mult_units(self.m_mult)
        if not 0.0 <= self.phi <= 1.0:
            raise ValueError("phi must lie in [0, 1]")
        if self.basis_count < 1:
            raise ValueError("basis_count must be >= 1")
        if self.b_sd < 0 or self.xi_var < 0:
            raise ValueError("noise scales must be non-negative")
        for name in ("ar_delta", "ar_eps"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @property
    def M(self) -> int:
        """Length of the latent measurement-error vector, ``10 (m_mult + 3)``."""
        return _mult_units(self.m_mult) + 30

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GeneratedData:
    config: ScenarioConfig
    dataset: TemporalSpatialDataset
    f_star: np.ndarray
    delta: np.ndarray
    eps: np.ndarray
    coefficients: np.ndarray = field(repr=False)
    carried: np.ndarray = field(repr=False)
    centering: float = 0.0


def _check_dim(scenario_id: int, d: int) -> None:
    if scenario_id in UNIVARIATE:
        ok = d == 1
    elif scenario_id in (5, 6):
        ok = d == 2
    else:
        ok = d >= 2
    if not ok:
        raise ValueError(f"scenario {scenario_id} is not defined for d = {d}")


def _mult_units(m_mult: float) -> int:
    units = 10 * m_mult
    if m_mult <= 0 or not math.isclose(units, round(units), abs_tol=1e-9):
        raise ValueError(f"10 * m_mult must be a positive integer, got m_mult = {m_mult}")
    return int(round(units))


def mi_schedule(n: int, m_mult: float) -> np.ndarray:
    """Quarter blocks of ``10(m+2), 10m, 10(m+3), 10(m+1)`` with ``m = m_mult``."""
    if n < 4 or n % 4:
        raise ValueError(f"n must be a positive multiple of 4, got {n}")
    u = _mult_units(m_mult)
    q = n // 4
    return np.repeat([u + 20, u, u + 30, u + 10], q).astype(np.int64)


def stream(seed: int, component: int, i: int) -> np.random.Generator:
    """The Philox generator owning draws of ``component`` at time ``i`` (0-based)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(component, i))))


def gen_design(n: int, m: np.ndarray, d: int, phi: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Design points and the carried-over mask, both in flat order.

    ``x_{i,j}`` repeats ``x_{i-1,j}`` with probability ``phi`` when that
    point exists (``j <= m_{i-1}``); otherwise it is a fresh uniform draw.
    """
    m = np.asarray(m, dtype=np.int64)
    if m.size != n:
        raise ValueError("length of m must equal n")
    if not 0.0 <= phi <= 1.0:
        raise ValueError("phi must lie in [0, 1]")
    blocks, flags = [], []
    prev = None
    for i in range(n):
        rng = stream(seed, DESIGN, i)
        coin = rng.random(m[i])
        fresh = rng.random((m[i], d))
        carry = np.zeros(m[i], dtype=bool)
        if prev is not None:
            k = min(m[i], prev.shape[0])
            carry[:k] = coin[:k] < phi
            fresh[:k][carry[:k]] = prev[:k][carry[:k]]
        blocks.append(fresh)
        flags.append(carry)
        prev = fresh
    return np.concatenate(blocks), np.concatenate(flags)


def sine_basis(t: int, x) -> float:
    """``h_t(x) = prod_j (pi / sqrt 2) sin(t x_j)``."""
    if t < 1:
        raise ValueError("basis index t must be >= 1")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return float(np.prod((math.pi / math.sqrt(2.0)) * np.sin(t * x)))


def sine_basis_matrix(x: np.ndarray, T: int) -> np.ndarray:
    """``H[k, t-1] = h_t(x_k)`` for ``t = 1..T``."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    t = np.arange(1, T + 1, dtype=float)
    return np.prod((math.pi / math.sqrt(2.0)) * np.sin(x[:, None, :] * t[None, :, None]), axis=2)


def gen_spatial_noise(x: np.ndarray, m: np.ndarray, cfg: ScenarioConfig) -> tuple[np.ndarray, np.ndarray]:
    """Spatial noise at the design points and the basis coefficients.

    ``c_{t,i} = ar_delta c_{t,i-1} + b_{t,i} / t`` with ``b ~ N(0, b_sd^2)``;
    ``delta_i(x) = sum_t c_{t,i} h_t(x)``. Coefficients are returned as an
    ``(n, T)`` array.
    """
    m = np.asarray(m, dtype=np.int64)
    T = cfg.basis_count
    t_idx = np.arange(1, T + 1, dtype=float)
    coef = np.zeros((m.size, T))
    c = np.zeros(T)
    for i in range(m.size):
        b = stream(cfg.seed, SPATIAL, i).normal(0.0, cfg.b_sd, T)
        c = cfg.ar_delta * c + b / t_idx
        coef[i] = c
    offsets = np.concatenate(([0], np.cumsum(m)))
    delta = np.empty(offsets[-1])
    for i in range(m.size):
        sl = slice(offsets[i], offsets[i + 1])
        delta[sl] = sine_basis_matrix(x[sl], T) @ coef[i]
    return delta, coef


def gen_measurement_error(n: int, m: np.ndarray, cfg: ScenarioConfig) -> np.ndarray:
    """First ``m_i`` entries of ``e_i = ar_eps e_{i-1} + xi_i``, ``xi_i ~ N(0, xi_var I_M)``."""
    m = np.asarray(m, dtype=np.int64)
    M = cfg.M
    if np.any(m > M):
        raise ValueError(f"m_i = {int(m.max())} exceeds the latent length M = {M}")
    sd = math.sqrt(cfg.xi_var)
    e = np.zeros(M)
    out = []
    for i in range(n):
        e = cfg.ar_eps * e + stream(cfg.seed, MEASUREMENT, i).normal(0.0, sd, M)
        out.append(e[: m[i]].copy())
    return np.concatenate(out)


# -- scenario functions ------------------------------------------------------

def _raw_univariate(scenario_id: int, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if scenario_id == 1:
        return np.select([x <= 0.2, x <= 0.4, x <= 0.6], [5.0, 2.0, 8.0], 1.0)
    if scenario_id == 2:
        return np.select(
            [x <= 0.4, x <= 0.6, x <= 0.8],
            [2.5 * x, 45 * x - 17, -40 * x + 34],
            30 * x - 22,
        )
    if scenario_id == 3:
        return (-2125 / 6) * x**4 + (2050 / 3) * x**3 - (2465 / 6) * x**2 + (248 / 3) * x
    if scenario_id == 4:
        return 2.0 * np.sin(2.0 * math.pi / np.sqrt(x + 0.1)) + 5.0
    raise ValueError(f"scenario {scenario_id} is not univariate")


_BREAKS = {1: [0.2, 0.4, 0.6], 2: [0.4, 0.6, 0.8], 3: None, 4: None}


@lru_cache(maxsize=None)
def centering_constant(scenario_id: int) -> float:
    """``int_0^1 f~`` for the univariate scenarios (0 for the others)."""
    if scenario_id not in UNIVARIATE:
        return 0.0
    val, _ = quad(lambda t: float(_raw_univariate(scenario_id, np.array(t))), 0.0, 1.0,
                  points=_BREAKS[scenario_id], limit=500, epsabs=1e-13, epsrel=1e-13)
    return float(val)


def _quarter_half_centers(d: int):
    h = d // 2
    def c(a, b):
        return np.concatenate((np.full(h, a), np.full(d - h, b)))
    return [c(0.25, 0.5), c(0.5, 0.25), c(0.75, 0.5), c(0.5, 0.75)]


def scenario_truth(scenario_id: int, d: int, x) -> np.ndarray | float:
    """Truth ``f*`` at points ``x`` (shape ``(q, d)``, ``(d,)`` or scalar for d = 1)."""
    _check_dim(scenario_id, d)
    arr = np.asarray(x, dtype=float)
    scalar = arr.ndim == 0 or (arr.ndim == 1 and d > 1)
    pts = arr.reshape(-1, d)
    if scenario_id in UNIVARIATE:
        out = _raw_univariate(scenario_id, pts[:, 0]) - centering_constant(scenario_id)
    elif scenario_id == 5:
        a = np.sum((pts - 0.75) ** 2, axis=1)
        b = np.sum((pts - 0.5) ** 2, axis=1)
        out = (a < b).astype(float)
    elif scenario_id == 6:
        out = (np.sum((pts - 0.5) ** 2, axis=1) <= 2.0 / 1000.0).astype(float)
    elif scenario_id == 7:
        a = np.sum((pts - 0.25) ** 2, axis=1)
        b = np.sum((pts - 0.75) ** 2, axis=1)
        out = np.where(a < b, 1.0, -1.0)
    else:
        dist = np.stack([np.sum((pts - q) ** 2, axis=1) for q in _quarter_half_centers(d)], axis=1)
        out = np.full(pts.shape[0], -1.0)
        for r, val in enumerate((2.0, 1.0, 0.0)):
            others = np.delete(dist, r, axis=1).min(axis=1)
            out = np.where(dist[:, r] < others, val, out)
    return float(out[0]) if scalar else out


def generate(cfg: ScenarioConfig) -> GeneratedData:
    m = mi_schedule(cfg.n, cfg.m_mult)
    x, carried = gen_design(cfg.n, m, cfg.d, cfg.phi, cfg.seed)
    f_star = scenario_truth(cfg.scenario_id, cfg.d, x)
    delta, coef = gen_spatial_noise(x, m, cfg)
    eps = gen_measurement_error(cfg.n, m, cfg)
    y = f_star + delta + eps
    ds = TemporalSpatialDataset(m, x, y)
    return GeneratedData(cfg, ds, f_star, delta, eps, coef, carried,
                         centering_constant(cfg.scenario_id))


def write_generated(data: GeneratedData, csv_path: str | Path, sidecar_path: str | Path) -> None:
    """Dataset CSV plus a JSON sidecar with the config, centering constant and truth."""
    write_dataset_csv(data.dataset, csv_path)
    side = {
        "config": data.config.to_dict(),
        "centering_constant": data.centering,
        "truth": [float(v) for v in data.f_star],
        "spatial_noise": [float(v) for v in data.delta],
        "measurement_error": [float(v) for v in data.eps],
    }
    with open(sidecar_path, "w") as fh:
        json.dump(side, fh, indent=1)
        fh.write("\n")
