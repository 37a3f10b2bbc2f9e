import networkx as nx
import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from opmark.asm_model import OpcodeVocabulary
from opmark.graph_features import (
    METRICS, MarkovGraph, adjacency_spectrum, compute_graph_features, feature_length, graph_features,
    metric_values, to_graph,
)
from opmark.markov import MarkovMatrix


def random_markov(rng, n, density):
    W = (rng.random((n, n)) < density) * rng.integers(1, 5, size=(n, n))
    rows = W.sum(axis=1, keepdims=True)
    return np.divide(W, rows, out=np.zeros((n, n)), where=rows > 0)


def oracle_metrics(W, k):
    L = W.tolist()
    node_bc, edge_bc = oracles.betweenness(L)
    return {
        "average_neighbor_degree": oracles.average_neighbor_degree(L),
        "average_degree_connectivity": oracles.average_degree_connectivity(L),
        "degree_centrality": oracles.degree_centrality(L),
        "out_degree_centrality": oracles.out_degree_centrality(L),
        "eigenvector_centrality": oracles.eigenvector_centrality(L),
        "closeness_centrality": oracles.closeness_centrality(L),
        "betweenness_centrality": node_bc,
        "edge_betweenness_centrality": edge_bc,
        "transitivity": oracles.transitivity(L),
        "adjacency_spectrum": oracles.spectrum_magnitudes(L, k),
    }


def compare_all(W, k=8, tol=1e-6):
    g = MarkovGraph(tuple(range(len(W))), W)
    got = metric_values(g)
    got["adjacency_spectrum"] = adjacency_spectrum(W, k)
    want = oracle_metrics(W, k)
    assert set(got) == set(want)
    for name in want:
        np.testing.assert_allclose(np.atleast_1d(got[name]), np.atleast_1d(want[name]), atol=tol, rtol=0,
                                   err_msg=name)


def as_matrix(W):
    v = OpcodeVocabulary(("<unk>",) + tuple(f"t{i}" for i in range(len(W) - 1)))
    return MarkovMatrix(v, np.asarray(W, dtype=float))


@pytest.mark.parametrize("seed", range(20))
def test_metrics_match_oracle(seed):
    rng = np.random.default_rng(seed)
    compare_all(random_markov(rng, int(rng.integers(1, 9)), rng.uniform(0.15, 0.7)))


def test_degenerate_graphs():
    compare_all(np.array([[1.0]]))
    compare_all(np.array([[0.0, 1.0], [0.0, 0.0]]))
    compare_all(np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]))


def test_to_graph_examples():
    W = np.zeros((4, 4))
    W[1, 2] = W[2, 3] = 1.0
    g = to_graph(as_matrix(W))
    assert g.nodes == (1, 2, 3) and len(g.edges) == 2
    assert len(to_graph(as_matrix(np.zeros((3, 3))))) == 0
    loop = np.zeros((2, 2))
    loop[1, 1] = 1.0
    g = to_graph(as_matrix(loop))
    assert g.nodes == (1,) and g.edges == [(1, 1, 1.0)]


def test_three_cycle_degree_centrality():
    W = np.array([[0, 1, 0], [0, 0, 1], [1, 0, 0]], dtype=float)
    fv = compute_graph_features(MarkovGraph((0, 1, 2), W))
    assert fv.values[METRICS.index("degree_centrality")] == 1.0


def test_triad_transitivity():
    W = (np.ones((3, 3)) - np.eye(3)) / 2
    fv = compute_graph_features(MarkovGraph((0, 1, 2), W))
    assert fv.values[len(METRICS)] == 1.0


def test_empty_graph_is_zero_vector():
    fv = graph_features(as_matrix(np.zeros((3, 3))), spectrum_k=5, aggregates=("mean", "max"))
    assert len(fv) == feature_length(5, ("mean", "max")) and not fv.values.any()


def test_spectrum_sorted_and_padded():
    W = np.array([[0, 1, 0], [0, 0, 1], [1, 0, 0]], dtype=float)
    s = adjacency_spectrum(W, 5)
    assert s.tolist() == pytest.approx([1, 1, 1, 0, 0])
    assert list(s) == sorted(s, reverse=True)


def test_bad_arguments():
    g = MarkovGraph((0,), np.ones((1, 1)))
    with pytest.raises(ValueError):
        compute_graph_features(g, spectrum_k=0)
    with pytest.raises(ValueError):
        compute_graph_features(g, aggregates=("median",))


@pytest.mark.parametrize("seed", range(15))
def test_networkx_agreement(seed):
    rng = np.random.default_rng(100 + seed)
    n = int(rng.integers(3, 12))
    W = random_markov(rng, n, 0.35)
    G = nx.DiGraph()
    G.add_nodes_from(range(n))
    for i, j in zip(*np.nonzero(W)):
        G.add_edge(int(i), int(j), weight=float(W[i, j]), distance=1.0 / float(W[i, j]))
    got = metric_values(MarkovGraph(tuple(range(n)), W))
    and_ = nx.average_neighbor_degree(G, source="out", target="out", weight="weight")
    np.testing.assert_allclose(got["average_neighbor_degree"], [and_[i] for i in range(n)], atol=1e-9)
    dc = nx.degree_centrality(G)
    np.testing.assert_allclose(got["degree_centrality"], [dc[i] for i in range(n)], atol=1e-12)
    # networkx measures closeness along incoming paths; reverse the graph for outgoing
    cc = nx.closeness_centrality(G.reverse(), distance="distance")
    np.testing.assert_allclose(got["closeness_centrality"], [cc[i] for i in range(n)], atol=1e-9)
    bc = nx.betweenness_centrality(G, weight="distance")
    np.testing.assert_allclose(got["betweenness_centrality"], [bc[i] for i in range(n)], atol=1e-9)
    ebc = nx.edge_betweenness_centrality(G, weight="distance")
    edges = list(zip(*np.nonzero(W)))
    np.testing.assert_allclose(got["edge_betweenness_centrality"], [ebc[(int(i), int(j))] for i, j in edges], atol=1e-9)
    assert got["transitivity"] == pytest.approx(nx.transitivity(G.to_undirected()), abs=1e-12)
    try:
        ec = nx.eigenvector_centrality(G, weight="weight", max_iter=1000, tol=1e-8)
    except nx.PowerIterationFailedConvergence:
        return
    np.testing.assert_allclose(got["eigenvector_centrality"], [ec[i] for i in range(n)], atol=1e-6)


@given(st.integers(0, 10_000))
def test_features_finite_and_fixed_length(seed):
    rng = np.random.default_rng(seed)
    W = random_markov(rng, int(rng.integers(1, 10)), rng.uniform(0.1, 0.9))
    fv = graph_features(as_matrix(W), spectrum_k=6, aggregates=("mean", "min", "max", "std"))
    assert len(fv) == feature_length(6, ("mean", "min", "max", "std"))
    assert np.isfinite(fv.values).all()
    spec = fv.values[-6:]
    assert list(spec) == sorted(spec, reverse=True)
