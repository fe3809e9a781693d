"""Shared data model: ragged temporal-spatial datasets, flat indexing, weights.

A dataset holds ``n`` time indices, each with ``m_i`` observations
``(x_{i,j}, y_{i,j})``. Everything downstream works on *flat* vectors of
length ``N_tot = sum(m_i)`` ordered by time then within-time index; the
raggedness is carried by the per-entry weight ``1 / (n * m_i)``.

The public index contract is 1-based, storage is 0-based.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class AlignmentError(ValueError):
    """A signal or weight vector does not match the dataset it is used with."""


class DatasetError(ValueError):
    """Malformed dataset input (bad counts, bounds or index bijection)."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TemporalSpatialDataset:
    """Immutable ragged collection of design points and responses.

    Parameters
    ----------
    m : sequence of int
        Per-time counts ``m_1..m_n`` (all >= 1).
    x : array (N_tot, d)
        Design points in ``[0, 1]^d``, flat order.
    y : array (N_tot,)
        Responses, flat order.
    """

    m: np.ndarray
    x: np.ndarray
    y: np.ndarray
    offsets: np.ndarray = field(init=False, repr=False)
    time_of: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        m = np.asarray(self.m)
        if m.ndim != 1 or m.size == 0:
            raise DatasetError("m must be a non-empty 1-d sequence of counts")
        if not np.all(np.equal(np.mod(m, 1), 0)) or np.any(m < 1):
            raise DatasetError("every m_i must be a positive integer")
        m = m.astype(np.int64)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        y = np.asarray(self.y, dtype=float).ravel()
        total = int(m.sum())
        if x.shape[0] != total or y.shape[0] != total:
            raise DatasetError(
                f"flattened storage has {x.shape[0]} points / {y.shape[0]} "
                f"responses but sum(m) = {total}"
            )
        if x.shape[1] < 1:
            raise DatasetError("spatial dimension must be >= 1")
        if not np.all(np.isfinite(x)) or np.any(x < 0.0) or np.any(x > 1.0):
            raise DatasetError("design points must lie in [0, 1]^d")
        if not np.all(np.isfinite(y)):
            raise DatasetError("responses must be finite")
        offsets = np.concatenate(([0], np.cumsum(m)))
        object.__setattr__(self, "m", _frozen(m))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "offsets", _frozen(offsets))
        object.__setattr__(self, "time_of", _frozen(np.repeat(np.arange(m.size), m)))

    @property
    def n(self) -> int:
        return int(self.m.size)

    @property
    def d(self) -> int:
        return int(self.x.shape[1])

    @property
    def size(self) -> int:
        """``N_tot``, the total number of observations."""
        return int(self.offsets[-1])

    def weights(self) -> np.ndarray:
        """Per-entry weights ``1 / (n m_i)``; they sum to one."""
        w = 1.0 / (self.n * self.m.astype(float))
        return _frozen(w[self.time_of])

    def flat_index(self, i: int, j: int) -> int:
        return flat_index(i, j, self)

    def unflat_index(self, k: int) -> tuple[int, int]:
        return unflat_index(k, self)

    def with_y(self, y: np.ndarray) -> "TemporalSpatialDataset":
        return TemporalSpatialDataset(self.m, self.x, y)

    def subset(self, idx: Sequence[int]) -> tuple["TemporalSpatialDataset", np.ndarray]:
        """Restrict to the 0-based flat entries ``idx``.

        Times left with no entries are dropped. Returns the new dataset and
        the 0-based flat indices (into ``self``) of its entries, in order.
        """
        idx = np.unique(np.asarray(idx, dtype=np.int64))
        if idx.size == 0:
            raise DatasetError("cannot build an empty subset")
        if idx[0] < 0 or idx[-1] >= self.size:
            raise IndexError("subset index out of range")
        t = self.time_of[idx]
        counts = np.bincount(t, minlength=self.n)
        m = counts[counts > 0]
        return TemporalSpatialDataset(m, self.x[idx], self.y[idx]), idx


def harmonic_mean_m(dataset: TemporalSpatialDataset) -> float:
    """``((1/n) sum_i 1/m_i)^{-1}``, the effective sampling frequency."""
    return float(1.0 / np.mean(1.0 / dataset.m.astype(float)))


def weighted_sq_norm(s: np.ndarray, w: np.ndarray) -> float:
    """``sum_k w_k s_k^2``, i.e. ``||s||_{nm}^2`` when ``w`` is the dataset weight."""
    s = np.asarray(s, dtype=float)
    w = np.asarray(w, dtype=float)
    if s.shape != w.shape:
        raise AlignmentError(f"signal shape {s.shape} != weight shape {w.shape}")
    return float(np.dot(w, s * s))


def flat_index(i: int, j: int, dataset: TemporalSpatialDataset) -> int:
    """1-based ``[[i, j]] = sum_{k<i} m_k + j``."""
    if not 1 <= i <= dataset.n:
        raise IndexError(f"time index {i} outside 1..{dataset.n}")
    if not 1 <= j <= dataset.m[i - 1]:
        raise IndexError(f"index j={j} outside 1..{dataset.m[i - 1]} at time {i}")
    return int(dataset.offsets[i - 1]) + j


def unflat_index(k: int, dataset: TemporalSpatialDataset) -> tuple[int, int]:
    """Inverse of :func:`flat_index`."""
    if not 1 <= k <= dataset.size:
        raise IndexError(f"flat index {k} outside 1..{dataset.size}")
    i = int(np.searchsorted(dataset.offsets, k - 1, side="right"))
    return i, k - int(dataset.offsets[i - 1])


def check_aligned(s: np.ndarray, dataset: TemporalSpatialDataset, name: str = "signal") -> np.ndarray:
    s = np.asarray(s, dtype=float)
    if s.shape != (dataset.size,):
        raise AlignmentError(f"{name} has shape {s.shape}, expected ({dataset.size},)")
    return s


# -- CSV ---------------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def write_dataset_csv(dataset: TemporalSpatialDataset, path: str | Path) -> None:
    """Write ``i,j,x1..xd,y`` rows in flat order (1-based indices)."""
    header = ["i", "j"] + [f"x{c + 1}" for c in range(dataset.d)] + ["y"]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for k in range(dataset.size):
            i = int(dataset.time_of[k])
            j = k - int(dataset.offsets[i])
            wr.writerow([i + 1, j + 1] + [_fmt(v) for v in dataset.x[k]] + [_fmt(dataset.y[k])])


def read_dataset_csv(path: str | Path) -> TemporalSpatialDataset:
    """Load a dataset CSV; rows may come in any order.

    Validates that the ``(i, j)`` pairs form exactly ``{1..n} x {1..m_i}``.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    d = len(header) - 3
    expected = ["i", "j"] + [f"x{c + 1}" for c in range(d)] + ["y"]
    if d < 1 or header != expected:
        raise DatasetError(f"{path}: header must be {','.join(expected)}")
    body = [r for r in rows[1:] if r]
    if not body:
        raise DatasetError(f"{path}: no data rows")
    try:
        ij = np.array([[int(r[0]), int(r[1])] for r in body], dtype=np.int64)
        vals = np.array([[float(v) for v in r[2:]] for r in body], dtype=float)
    except (ValueError, IndexError) as exc:
        raise DatasetError(f"{path}: malformed row ({exc})") from None
    if vals.shape[1] != d + 1:
        raise DatasetError(f"{path}: inconsistent column count")
    n = int(ij[:, 0].max())
    if ij[:, 0].min() < 1 or ij[:, 1].min() < 1:
        raise DatasetError(f"{path}: indices are 1-based")
    m = np.bincount(ij[:, 0] - 1, minlength=n)
    if np.any(m == 0):
        raise DatasetError(f"{path}: time index without observations")
    if np.any(ij[:, 1] > m[ij[:, 0] - 1]):
        raise DatasetError(f"{path}: (i, j) pairs are not a bijection onto flat indices")
    offsets = np.concatenate(([0], np.cumsum(m)))
    flat = offsets[ij[:, 0] - 1] + ij[:, 1] - 1
    if np.unique(flat).size != flat.size:
        raise DatasetError(f"{path}: duplicate (i, j) pair")
    order = np.argsort(flat)
    return TemporalSpatialDataset(m, vals[order, :d], vals[order, d])
