"""Symmetric K-nearest-neighbor graph and its oriented incidence operator."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .core import AlignmentError

__all__ = [
    "KnnGraph",
    "build_knn_graph",
    "knn_indices",
    "graph_tv",
    "apply_incidence",
    "apply_incidence_transpose",
    "write_edge_list",
    "read_edge_list",
]

# Below this many points a dense distance matrix is cheaper than a tree.
BRUTE_FORCE_BELOW = 512


@dataclass(frozen=True)
class KnnGraph:
    """Undirected graph on ``node_count`` flat indices (0-based storage).

    ``edges`` has one row ``(u, v)`` per edge with ``u < v``, sorted
    lexicographically; row ``e`` of the incidence matrix is ``+1`` at ``u``
    and ``-1`` at ``v``.
    """

    node_count: int
    K: int
    edges: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (np.any(e[:, 0] >= e[:, 1]) or e.min() < 0 or e.max() >= self.node_count):
            raise ValueError("edges must satisfy 0 <= u < v < node_count")
        e.setflags(write=False)
        object.__setattr__(self, "edges", e)

    @property
    def edge_count(self) -> int:
        return int(self.edges.shape[0])

    @property
    def incidence(self) -> sp.csr_matrix:
        if "D" not in self._cache:
            E = self.edge_count
            rows = np.repeat(np.arange(E), 2)
            cols = self.edges.ravel()
            vals = np.tile([1.0, -1.0], E)
            self._cache["D"] = sp.csr_matrix((vals, (rows, cols)), shape=(E, self.node_count))
        return self._cache["D"]

    @property
    def incidence_t(self) -> sp.csr_matrix:
        if "DT" not in self._cache:
            self._cache["DT"] = self.incidence.T.tocsr()
        return self._cache["DT"]

    @property
    def adjacency(self) -> sp.csr_matrix:
        if "A" not in self._cache:
            u, v = self.edges[:, 0], self.edges[:, 1]
            ones = np.ones(2 * self.edge_count)
            A = sp.csr_matrix(
                (ones, (np.concatenate((u, v)), np.concatenate((v, u)))),
                shape=(self.node_count, self.node_count),
            )
            A.sort_indices()
            self._cache["A"] = A
        return self._cache["A"]

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.adjacency.indptr)

    def neighbors(self, node: int) -> np.ndarray:
        """Sorted adjacent nodes of ``node``."""
        A = self.adjacency
        return A.indices[A.indptr[node]:A.indptr[node + 1]]

    def components(self) -> tuple[int, np.ndarray]:
        return sp.csgraph.connected_components(self.adjacency, directed=False)


def _rank_candidates(query_idx: np.ndarray, queries: np.ndarray, points: np.ndarray,
                     cand: np.ndarray, K: int, exclude_self: bool) -> np.ndarray:
    """Exact top-``K`` among candidate columns, ordered by (distance, index)."""
    diff = queries[:, None, :] - points[cand]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    if exclude_self:
        d2 = np.where(cand == query_idx[:, None], np.inf, d2)
    # Stable sort by index, then by distance: ties keep index order.
    by_index = np.argsort(cand, axis=1, kind="stable")
    cand = np.take_along_axis(cand, by_index, axis=1)
    d2 = np.take_along_axis(d2, by_index, axis=1)
    order = np.argsort(d2, axis=1, kind="stable")
    return np.take_along_axis(cand, order, axis=1)[:, :K]


def knn_indices(points: np.ndarray, queries: np.ndarray | None, K: int,
                chunk: int = 2048) -> np.ndarray:
    """Exact ``K`` nearest design points for each query, ties by smaller index.

    With ``queries=None`` the queries are the points themselves and each
    point is excluded from its own neighbor list (duplicates are not).
    Returns an ``(n_queries, K)`` array of 0-based indices.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    self_query = queries is None
    Q = points if self_query else np.asarray(queries, dtype=float).reshape(-1, points.shape[1])
    N = points.shape[0]
    avail = N - 1 if self_query else N
    if not 1 <= K <= avail:
        raise ValueError(f"K={K} must lie in 1..{avail}")
    out = np.empty((Q.shape[0], K), dtype=np.int64)
    qidx_all = np.arange(Q.shape[0])
    if N < BRUTE_FORCE_BELOW:
        all_cols = np.arange(N)
        for lo in range(0, Q.shape[0], chunk):
            sl = slice(lo, lo + chunk)
            cand = np.broadcast_to(all_cols, (Q[sl].shape[0], N))
            out[sl] = _rank_candidates(qidx_all[sl], Q[sl], points, cand, K, self_query)
        return out

    tree = cKDTree(points)
    todo = qidx_all
    kq = min(N, K + 1 + 4 if self_query else K + 4)
    while todo.size:
        dist, cand = tree.query(Q[todo], k=kq)
        dist = dist.reshape(todo.size, kq)
        cand = cand.reshape(todo.size, kq)
        # The K-th distance among kept candidates (excluding self) must be
        # strictly below the farthest candidate returned, otherwise a tied
        # point may sit outside the candidate set; those rows are requeried.
        ranked = _rank_candidates(todo, Q[todo], points, cand, K, self_query)
        kth = points[ranked[:, -1]] - Q[todo]
        kth = np.sqrt(np.einsum("ij,ij->i", kth, kth))
        safe = (dist[:, -1] > kth * (1 + 1e-9) + 1e-300) | (kq == N)
        out[todo[safe]] = ranked[safe]
        todo = todo[~safe]
        kq = min(N, 2 * kq)
    return out


def build_knn_graph(points: np.ndarray, K: int) -> KnnGraph:
    """Symmetrized exact K-NN graph: ``u ~ v`` if either is among the other's K nearest."""
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    N = points.shape[0]
    if K < 1:
        raise ValueError("K must be >= 1")
    if K >= N:
        raise ValueError(f"K={K} must be smaller than the number of points {N}")
    nbr = knn_indices(points, None, K)
    u = np.repeat(np.arange(N), K)
    v = nbr.ravel()
    pairs = np.stack((np.minimum(u, v), np.maximum(u, v)), axis=1)
    pairs = np.unique(pairs, axis=0)
    g = KnnGraph(N, K, pairs)
    g._cache["knn"] = nbr
    return g


def _check(theta: np.ndarray, size: int, name: str) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (size,):
        raise AlignmentError(f"{name} has shape {theta.shape}, expected ({size},)")
    return theta


def apply_incidence(theta: np.ndarray, g: KnnGraph) -> np.ndarray:
    """Edge differences ``theta_u - theta_v``."""
    theta = _check(theta, g.node_count, "signal")
    return theta[g.edges[:, 0]] - theta[g.edges[:, 1]]


def apply_incidence_transpose(w: np.ndarray, g: KnnGraph) -> np.ndarray:
    w = _check(w, g.edge_count, "edge values")
    n = g.node_count
    return (np.bincount(g.edges[:, 0], weights=w, minlength=n)
            - np.bincount(g.edges[:, 1], weights=w, minlength=n))


def graph_tv(theta: np.ndarray, g: KnnGraph) -> float:
    return float(np.abs(apply_incidence(theta, g)).sum())


def write_edge_list(g: KnnGraph, path: str | Path) -> None:
    """One ``u v`` line per edge, 1-based."""
    with open(path, "w") as fh:
        for u, v in g.edges + 1:
            fh.write(f"{u} {v}\n")


def read_edge_list(path: str | Path, node_count: int, K: int) -> KnnGraph:
    data = np.loadtxt(path, dtype=np.int64, ndmin=2)
    if data.size == 0:
        return KnnGraph(node_count, K, np.zeros((0, 2), dtype=np.int64))
    e = data - 1
    e = np.stack((e.min(axis=1), e.max(axis=1)), axis=1)
    return KnnGraph(node_count, K, np.unique(e, axis=0))
