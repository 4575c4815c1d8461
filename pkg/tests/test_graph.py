import numpy as np
import pytest

from sdfa.errors import ConfigError, ShapeError
from sdfa.graph import (BODY25_EDGES, SkeletonGraph, adjacency_from_edges, build_body25_graph, build_graph,
                        effective_adjacency, normalize_adjacency)


@pytest.fixture(scope="module")
def body():
    return build_body25_graph()


def test_body25_adjacency(body):
    assert body.A.shape == (25, 25)
    assert np.all(np.diag(body.A) == 1)
    assert body.A[1, 8] == body.A[8, 1] == 1
    np.testing.assert_array_equal(body.A, body.A.T)
    assert body.A.sum() == 25 + 2 * len(body.edges)
    assert len(BODY25_EDGES) == 24  # a tree over 25 joints


def test_body25_tree_is_connected(body):
    seen, frontier = {8}, [8]
    while frontier:
        j = frontier.pop()
        for k in np.flatnonzero(body.A[j]):
            if k not in seen:
                seen.add(int(k))
                frontier.append(int(k))
    assert seen == set(range(25))


def test_single_node():
    np.testing.assert_array_equal(normalize_adjacency(np.array([[1.0]])), [[1.0]])


def test_three_node_path():
    A = adjacency_from_edges(3, [(0, 1), (1, 2)])
    expected = [[0.5, 0.5, 0], [1 / 3, 1 / 3, 1 / 3], [0, 0.5, 0.5]]
    np.testing.assert_allclose(normalize_adjacency(A), expected, rtol=1e-15)


def test_row_stochastic_with_same_support(body):
    np.testing.assert_allclose(body.A_hat.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(body.A_hat > 0, body.A == 1)


def test_symmetric_normalisation():
    g = build_graph(3, [(0, 1), (1, 2)], norm="symmetric")
    d = np.array([2.0, 3.0, 2.0])
    np.testing.assert_allclose(g.A_hat, g.A / np.sqrt(np.outer(d, d)))
    with pytest.raises(ConfigError):
        normalize_adjacency(g.A, "column")


def test_modulation(body):
    assert np.array_equal(effective_adjacency(body.A_hat, np.ones((25, 25))), body.A_hat)
    assert not np.any(effective_adjacency(body.A_hat, np.zeros((25, 25))))
    rng = np.random.default_rng(0)
    M = rng.normal(size=(25, 25))
    eff = effective_adjacency(body.A_hat, M)
    for i in range(25):
        for j in range(25):
            assert eff[i, j] == body.A_hat[i, j] * M[i, j]
    assert np.all(eff[body.A_hat == 0] == 0)
    with pytest.raises(ShapeError):
        effective_adjacency(body.A_hat, np.ones((24, 24)))


def test_edge_table_round_trip(body):
    text = body.edge_table()
    assert text.splitlines()[0] == "0 1"
    again = SkeletonGraph.from_edge_table(text, 25)
    np.testing.assert_array_equal(again.A_hat, body.A_hat)


def test_bad_edge():
    with pytest.raises(ConfigError):
        build_graph(3, [(0, 3)])


def test_graph_is_immutable(body):
    with pytest.raises(ValueError):
        body.A_hat[0, 0] = 2.0
