"""Graph metrics over the weighted directed graph of a Markov matrix.

Conventions (each metric is one scalar per node or edge, then aggregated):

* out-neighbour average degree ``sum_j w_ij k_j / s_i`` with ``k`` the
  out-degree and ``s`` the out-strength;
* degree connectivity: the same quantity pooled per out-degree class;
* degree centrality ``(in + out) / (n - 1)``, out-degree centrality
  ``out / (n - 1)``;
* eigenvector centrality from in-edges (left eigenvector), shifted power
  iteration, uniform fallback on non-convergence;
* shortest paths use distance ``1 / weight``; closeness is measured along
  outgoing paths with reachable-set normalization;
* betweenness normalized by ``(n-1)(n-2)``, edge betweenness by ``n(n-1)``;
* transitivity on the undirected simple graph;
* adjacency spectrum: eigenvalue magnitudes, descending, zero padded.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components, shortest_path

from .markov import FeatureVector, MarkovMatrix

log = logging.getLogger(__name__)

METRICS = (
    "average_neighbor_degree",
    "average_degree_connectivity",
    "degree_centrality",
    "out_degree_centrality",
    "eigenvector_centrality",
    "closeness_centrality",
    "betweenness_centrality",
    "edge_betweenness_centrality",
)
AGGREGATES = {"mean": np.mean, "min": np.min, "max": np.max, "std": np.std}
DEFAULT_SPECTRUM_K = 16
EIG_TOL = 1e-8
EIG_MAX_ITER = 1000
_TIE_RTOL = 1e-10


@dataclass(frozen=True)
class MarkovGraph:
    nodes: tuple[int, ...]
    weights: np.ndarray  # len(nodes) x len(nodes), zero = no edge

    @property
    def edges(self) -> list[tuple[int, int, float]]:
        r, c = np.nonzero(self.weights)
        return [(self.nodes[i], self.nodes[j], float(self.weights[i, j])) for i, j in zip(r, c)]

    def __len__(self):
        return len(self.nodes)


def to_graph(matrix: MarkovMatrix | np.ndarray) -> MarkovGraph:
    P = matrix.probs if isinstance(matrix, MarkovMatrix) else np.asarray(matrix, dtype=np.float64)
    nz = P > 0
    keep = np.flatnonzero(nz.any(axis=0) | nz.any(axis=1))
    W = np.where(nz, P, 0.0)[np.ix_(keep, keep)]
    return MarkovGraph(tuple(int(k) for k in keep), W)


def feature_length(spectrum_k: int = DEFAULT_SPECTRUM_K, aggregates: Sequence[str] = ("mean",)) -> int:
    return len(METRICS) * len(aggregates) + 1 + spectrum_k


# ---------------------------------------------------------------------------
# per-metric helpers; all take the dense weight matrix W of the graph

def average_neighbor_degree(W: np.ndarray) -> np.ndarray:
    adj = W > 0
    k = adj.sum(axis=1).astype(np.float64)
    s = W.sum(axis=1)
    num = W @ k
    return np.divide(num, s, out=np.zeros_like(num), where=s > 0)


def average_degree_connectivity(W: np.ndarray) -> np.ndarray:
    """Values per distinct out-degree class, ordered by degree."""
    adj = W > 0
    k = adj.sum(axis=1)
    s = W.sum(axis=1)
    num = W @ k.astype(np.float64)
    out = []
    for deg in np.unique(k):
        members = k == deg
        den = s[members].sum()
        out.append(num[members].sum() / den if den > 0 else 0.0)
    return np.asarray(out)


def degree_centrality(W: np.ndarray) -> np.ndarray:
    n = len(W)
    if n <= 1:
        return np.ones(n)
    adj = W > 0
    return (adj.sum(axis=0) + adj.sum(axis=1)) / (n - 1)


def out_degree_centrality(W: np.ndarray) -> np.ndarray:
    n = len(W)
    if n <= 1:
        return np.ones(n)
    return (W > 0).sum(axis=1) / (n - 1)


def eigenvector_centrality(W: np.ndarray, tol: float = EIG_TOL, max_iter: int = EIG_MAX_ITER) -> np.ndarray:
    n = len(W)
    x = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        last = x
        x = last + last @ W
        norm = np.sqrt(x @ x)
        if norm == 0:
            break
        x = x / norm
        if np.abs(x - last).sum() < n * tol:
            return x
    log.info("eigenvector centrality did not converge on %d nodes; using uniform scores", n)
    return np.full(n, 1.0 / np.sqrt(n))


def _distances(W: np.ndarray) -> np.ndarray:
    L = np.zeros_like(W)
    np.divide(1.0, W, out=L, where=W > 0)
    np.fill_diagonal(L, 0.0)
    return shortest_path(L, method="D", directed=True)


def closeness_centrality(W: np.ndarray, D: np.ndarray | None = None) -> np.ndarray:
    n = len(W)
    if n <= 1:
        return np.zeros(n)
    D = _distances(W) if D is None else D
    reach = np.isfinite(D)
    np.fill_diagonal(reach, False)
    r = reach.sum(axis=1).astype(np.float64)
    total = np.where(reach, D, 0.0).sum(axis=1)
    ok = (r > 0) & (total > 0)
    out = np.zeros(n)
    out[ok] = (r[ok] / total[ok]) * (r[ok] / (n - 1))
    return out


def _path_tensors(W: np.ndarray, D: np.ndarray):
    """Shortest-path DAG membership ``T[s,u,v]`` plus path counts and dependencies."""
    n = len(W)
    adj = W > 0
    np.fill_diagonal(adj, False)
    L = np.zeros_like(W)
    np.divide(1.0, W, out=L, where=adj)
    Dfin = np.where(np.isfinite(D), D, np.inf)
    with np.errstate(invalid="ignore"):
        gap = Dfin[:, :, None] + L[None, :, :] - Dfin[:, None, :]
        T = adj[None, :, :] & np.isfinite(gap) & (np.abs(gap) <= _TIE_RTOL * np.maximum(1.0, Dfin[:, None, :]))
    Tf = T.astype(np.float64)
    eye = np.eye(n)
    sigma = eye.copy()
    for _ in range(n):
        nxt = eye + np.einsum("su,suv->sv", sigma, Tf)
        if np.array_equal(nxt, sigma):
            break
        sigma = nxt
    ratio = np.zeros((n, n, n))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(T, sigma[:, :, None] / sigma[:, None, :], 0.0)
    delta = np.zeros((n, n))
    for _ in range(n):
        nxt = np.einsum("suv,sv->su", ratio, 1.0 + delta)
        if np.array_equal(nxt, delta):
            break
        delta = nxt
    return T, ratio, delta


def betweenness_centralities(W: np.ndarray, D: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(node betweenness, edge betweenness over edges in ``np.nonzero(W)`` order)."""
    n = len(W)
    D = _distances(W) if D is None else D
    _, ratio, delta = _path_tensors(W, D)
    node = delta.sum(axis=0) - np.diag(delta)
    if n > 2:
        node = node / ((n - 1) * (n - 2))
    edge_all = np.einsum("suv,sv->uv", ratio, 1.0 + delta)
    if n > 1:
        edge_all = edge_all / (n * (n - 1))
    r, c = np.nonzero(W)
    return node, edge_all[r, c]


def transitivity(W: np.ndarray) -> float:
    U = ((W > 0) | (W > 0).T).astype(np.float64)
    np.fill_diagonal(U, 0.0)
    d = U.sum(axis=1)
    triples = (d * (d - 1)).sum()
    if triples == 0:
        return 0.0
    return float(np.trace(U @ U @ U) / triples)


def adjacency_spectrum(W: np.ndarray, k: int = DEFAULT_SPECTRUM_K) -> np.ndarray:
    """Top-``k`` eigenvalue magnitudes, computed per strongly connected block.

    The spectrum of a matrix in block-triangular (condensation) order is the
    union of its diagonal blocks' spectra; singleton blocks contribute their
    self-loop weight exactly, which keeps nilpotent parts at exactly zero.
    """
    mags: list[float] = []
    if len(W):
        ncomp, labels = connected_components(W > 0, directed=True, connection="strong")
        for c in range(ncomp):
            members = np.flatnonzero(labels == c)
            if len(members) == 1:
                mags.append(abs(float(W[members[0], members[0]])))
            else:
                mags.extend(np.abs(np.linalg.eigvals(W[np.ix_(members, members)])).tolist())
    mags.sort(reverse=True)
    out = np.zeros(k)
    top = mags[:k]
    out[: len(top)] = top
    return out


def metric_values(graph: MarkovGraph) -> dict[str, np.ndarray | float]:
    """Raw per-node / per-edge values for every metric (before aggregation)."""
    W = graph.weights
    D = _distances(W)
    node_bc, edge_bc = betweenness_centralities(W, D)
    return {
        "average_neighbor_degree": average_neighbor_degree(W),
        "average_degree_connectivity": average_degree_connectivity(W),
        "degree_centrality": degree_centrality(W),
        "out_degree_centrality": out_degree_centrality(W),
        "eigenvector_centrality": eigenvector_centrality(W),
        "closeness_centrality": closeness_centrality(W, D),
        "betweenness_centrality": node_bc,
        "edge_betweenness_centrality": edge_bc,
        "transitivity": transitivity(W),
    }


def compute_graph_features(graph: MarkovGraph, spectrum_k: int = DEFAULT_SPECTRUM_K,
                           aggregates: Sequence[str] = ("mean",), mode: str = "linear") -> FeatureVector:
    """Fixed-length vector: aggregated metrics, transitivity, then the spectrum."""
    if spectrum_k < 1:
        raise ValueError("spectrum_k must be positive")
    for a in aggregates:
        if a not in AGGREGATES:
            raise ValueError(f"unknown aggregate {a!r}")
    schema = f"GF:{mode}"
    if len(graph) == 0:
        log.warning("empty graph; graph features are all zero")
        return FeatureVector(schema, np.zeros(feature_length(spectrum_k, aggregates)))
    values = metric_values(graph)
    out: list[float] = []
    for name in METRICS:
        v = np.asarray(values[name], dtype=np.float64)
        for a in aggregates:
            out.append(float(AGGREGATES[a](v)) if v.size else 0.0)
    out.append(float(values["transitivity"]))
    out.extend(adjacency_spectrum(graph.weights, spectrum_k).tolist())
    return FeatureVector(schema, np.asarray(out))


def graph_features(matrix: MarkovMatrix, spectrum_k: int = DEFAULT_SPECTRUM_K,
                   aggregates: Sequence[str] = ("mean",)) -> FeatureVector:
    return compute_graph_features(to_graph(matrix), spectrum_k, aggregates, matrix.mode)
