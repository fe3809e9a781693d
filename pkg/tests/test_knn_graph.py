import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_knn_edges
from tempspat.core import AlignmentError
from tempspat.knn_graph import (
    KnnGraph,
    apply_incidence,
    apply_incidence_transpose,
    build_knn_graph,
    graph_tv,
    knn_indices,
    read_edge_list,
    write_edge_list,
)


def _edge_set(g):
    return {tuple(map(int, e)) for e in g.edges}


def test_collinear_example():
    g = build_knn_graph(np.array([[0.0], [0.4], [1.0]]), 1)
    assert _edge_set(g) == {(0, 1), (1, 2)}


def test_two_points():
    g = build_knn_graph(np.array([[0.2], [0.7]]), 1)
    assert _edge_set(g) == {(0, 1)}


def test_complete_graph():
    pts = np.random.default_rng(0).random((9, 2))
    g = build_knn_graph(pts, 8)
    assert g.edge_count == 9 * 8 // 2


def test_rejects_bad_K():
    pts = np.random.default_rng(0).random((5, 2))
    with pytest.raises(ValueError):
        build_knn_graph(pts, 5)
    with pytest.raises(ValueError):
        build_knn_graph(pts, 0)


@pytest.mark.parametrize("N,d,K", [(60, 1, 3), (80, 2, 5), (50, 3, 4), (700, 2, 5), (600, 1, 2)])
def test_matches_brute_force(N, d, K):
    pts = np.random.default_rng(N + d).random((N, d))
    assert _edge_set(build_knn_graph(pts, K)) == brute_knn_edges(pts, K)


@pytest.mark.parametrize("N", [40, 900])
def test_ties_and_duplicates_broken_by_index(N):
    # Points on a coarse lattice with repeats: many equal distances.
    rng = np.random.default_rng(N)
    pts = rng.integers(0, 6, size=(N, 2)) / 5.0
    for K in (1, 4):
        assert _edge_set(build_knn_graph(pts, K)) == brute_knn_edges(pts, K)
    nbr = knn_indices(pts, None, 3)
    for a in range(0, N, max(1, N // 25)):
        d2 = ((pts - pts[a]) ** 2).sum(axis=1)
        d2[a] = np.inf
        expect = np.lexsort((np.arange(N), d2))[:3]
        np.testing.assert_array_equal(nbr[a], expect)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_structure(seed, K):
    rng = np.random.default_rng(seed)
    pts = rng.random((25, 2))
    g = build_knn_graph(pts, K)
    A = g.adjacency
    assert (A != A.T).nnz == 0
    assert A.diagonal().sum() == 0
    assert np.all(g.degrees >= K)
    assert len(_edge_set(g)) == g.edge_count
    D = g.incidence
    assert D.shape == (g.edge_count, 25)
    assert np.all(np.diff(D.indptr) == 2)
    np.testing.assert_array_equal(np.asarray(D.sum(axis=1)).ravel(), 0.0)
    # Permuting the input relabels the same graph.
    perm = rng.permutation(25)
    gp = build_knn_graph(pts[perm], K)
    mapped = {tuple(sorted((int(perm[u]), int(perm[v])))) for u, v in gp.edges}
    assert mapped == _edge_set(g)
    # Denser with larger K.
    if K < 24:
        assert build_knn_graph(pts, K + 1).edge_count >= g.edge_count
        assert _edge_set(g) <= _edge_set(build_knn_graph(pts, K + 1))


def test_graph_tv_examples():
    g2 = KnnGraph(2, 1, np.array([[0, 1]]))
    assert graph_tv(np.array([0.0, 1.0]), g2) == 1.0
    path = KnnGraph(3, 1, np.array([[0, 1], [1, 2]]))
    assert graph_tv(np.array([0.0, 2.0, 1.0]), path) == 3.0
    assert graph_tv(np.full(3, 4.2), path) == 0.0
    with pytest.raises(AlignmentError):
        graph_tv(np.zeros(4), path)


def test_incidence_adjoint_and_tv():
    rng = np.random.default_rng(3)
    g = build_knn_graph(rng.random((40, 2)), 4)
    theta = rng.normal(size=40)
    w = rng.normal(size=g.edge_count)
    lhs = np.dot(apply_incidence(theta, g), w)
    rhs = np.dot(theta, apply_incidence_transpose(w, g))
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))
    assert np.abs(apply_incidence(theta, g)).sum() == pytest.approx(graph_tv(theta, g), rel=1e-14)
    np.testing.assert_array_equal(apply_incidence(np.ones(40), g), 0.0)
    np.testing.assert_array_equal(apply_incidence_transpose(np.zeros(g.edge_count), g), 0.0)
    with pytest.raises(AlignmentError):
        apply_incidence_transpose(np.zeros(g.edge_count + 1), g)


def test_edge_list_round_trip(tmp_path):
    g = build_knn_graph(np.random.default_rng(5).random((30, 3)), 3)
    path = tmp_path / "edges.txt"
    write_edge_list(g, path)
    first = path.read_text().splitlines()[0].split()
    assert int(first[0]) >= 1
    back = read_edge_list(path, 30, 3)
    np.testing.assert_array_equal(back.edges, g.edges)


def test_invalid_edges_rejected():
    with pytest.raises(ValueError):
        KnnGraph(3, 1, np.array([[1, 1]]))
    with pytest.raises(ValueError):
        KnnGraph(3, 1, np.array([[0, 3]]))
