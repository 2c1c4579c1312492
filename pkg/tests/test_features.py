"""Centrality measures against brute-force oracles, exhaustively on all
connected graphs of up to 7 nodes (via the networkx graph atlas)."""

import itertools

import numpy as np
import pytest

from gabo import features
from gabo.graphs import make_graph


def graph_from_edges(n, edges):
    feats = np.zeros((n, 9), dtype=np.int64)
    return make_graph(n, feats, edges, label=0)


P3 = graph_from_edges(3, [(0, 1), (1, 2)])


# ---------------------------------------------------------------------------
# oracles (path enumeration / BFS / dense power iteration)


def oracle_all_shortest_paths(adj, s, t):
    """Every shortest s-t path, by BFS layering plus DFS over the DAG."""
    n = len(adj)
    dist = {s: 0}
    frontier = [s]
    while frontier:
        nxt = []
        for v in frontier:
            for w in adj[v]:
                if w not in dist:
                    dist[w] = dist[v] + 1
                    nxt.append(w)
        frontier = nxt
    if t not in dist:
        return []
    paths = []

    def walk(v, path):
        if v == t:
            paths.append(list(path))
            return
        for w in adj[v]:
            if dist.get(w, -1) == dist[v] + 1:
                path.append(w)
                walk(w, path)
                path.pop()

    walk(s, [s])
    return paths


def oracle_betweenness(g):
    from fractions import Fraction

    n = g.num_nodes
    adj = [[] for _ in range(n)]
    for u, v in g.edges:
        adj[u].append(v)
    if n < 3:
        return np.zeros(n)
    bc = [Fraction(0)] * n
    for s, t in itertools.combinations(range(n), 2):
        paths = oracle_all_shortest_paths(adj, s, t)
        if not paths:
            continue
        for p in paths:
            for v in p[1:-1]:
                bc[v] += Fraction(1, len(paths))
    denom = Fraction((n - 1) * (n - 2), 2)
    return np.array([float(b / denom) for b in bc])


def oracle_closeness(g):
    n = g.num_nodes
    adj = [[] for _ in range(n)]
    for u, v in g.edges:
        adj[u].append(v)
    out = np.zeros(n)
    for s in range(n):
        dist = {s: 0}
        frontier = [s]
        while frontier:
            nxt = []
            for v in frontier:
                for w in adj[v]:
                    if w not in dist:
                        dist[w] = dist[v] + 1
                        nxt.append(w)
            frontier = nxt
        reach = [d for v, d in dist.items() if v != s]
        if not reach or n == 1:
            continue
        r = len(reach)
        out[s] = (r / (n - 1)) * (r / sum(reach))
    return out


def oracle_pagerank(g, damping=0.85, iters=5000):
    n = g.num_nodes
    M = np.zeros((n, n))
    deg = np.zeros(n)
    for u, v in g.edges:
        deg[u] += 1
    for u, v in g.edges:
        M[v, u] = 1.0 / deg[u]
    for u in range(n):
        if deg[u] == 0:
            M[:, u] = 1.0 / n
    G = damping * M + (1 - damping) / n
    x = np.full(n, 1.0 / n)
    for _ in range(iters):
        x = G @ x
    return x


# ---------------------------------------------------------------------------
# examples


def test_degree_examples():
    assert features.degree(P3).tolist() == [1.0, 2.0, 1.0]
    lonely = graph_from_edges(2, [])
    assert features.degree(lonely).tolist() == [0.0, 0.0]
    star = graph_from_edges(5, [(0, i) for i in range(1, 5)])
    assert features.degree(star)[0] == 4.0


def test_pagerank_k2_symmetry():
    k2 = graph_from_edges(2, [(0, 1)])
    assert features.pagerank(k2) == pytest.approx([0.5, 0.5], abs=1e-12)


def test_pagerank_single_node():
    g = graph_from_edges(1, [])
    assert features.pagerank(g) == pytest.approx([1.0], abs=1e-12)


def test_pagerank_star_vs_dense_oracle():
    star = graph_from_edges(4, [(0, 1), (0, 2), (0, 3)])
    mine = features.pagerank(star)
    assert np.abs(mine - oracle_pagerank(star)).max() < 1e-8


def test_pagerank_nonconvergence_reports_residual():
    k2 = graph_from_edges(2, [(0, 1)])
    with pytest.raises(features.PagerankError, match="residual"):
        features.pagerank(k2, tol=0.0, max_iter=3)


def test_betweenness_p3():
    assert features.betweenness(P3) == pytest.approx([0.0, 1.0, 0.0], abs=1e-12)


def test_betweenness_complete_graph_is_zero():
    k5 = graph_from_edges(5, list(itertools.combinations(range(5), 2)))
    assert np.abs(features.betweenness(k5)).max() == 0.0


def test_closeness_p3():
    vals = features.closeness(P3)
    assert vals[1] == pytest.approx(1.0, abs=1e-12)
    assert vals[0] == pytest.approx(2.0 / 3.0, abs=1e-12)
    assert vals[2] == pytest.approx(2.0 / 3.0, abs=1e-12)


def test_closeness_isolated_node_zero():
    g = graph_from_edges(3, [(0, 1)])
    assert features.closeness(g)[2] == 0.0


def test_pagerank_sums_to_one():
    rng = np.random.default_rng(0)
    for _ in range(10):
        n = int(rng.integers(2, 9))
        edges = [(int(a), int(b)) for a, b in
                 rng.integers(0, n, size=(n, 2)) if a != b]
        g = graph_from_edges(n, edges)
        assert abs(features.pagerank(g).sum() - 1.0) < 1e-9


# ---------------------------------------------------------------------------
# exhaustive sweep over the atlas (all graphs on <= 7 nodes)


def _atlas_connected():
    import networkx as nx
    out = []
    for G in nx.graph_atlas_g()[1:]:
        if G.number_of_nodes() >= 1 and nx.is_connected(G):
            out.append(graph_from_edges(G.number_of_nodes(), list(G.edges())))
    return out


ATLAS = _atlas_connected()


def test_atlas_has_expected_size():
    # connected graphs up to iso on 1..7 nodes: 1+1+2+6+21+112+853
    assert len(ATLAS) == 996


def test_betweenness_exhaustive_vs_oracle():
    for g in ATLAS:
        mine = features.betweenness(g)
        want = oracle_betweenness(g)
        assert np.array_equal(mine, want), g.edges


def test_closeness_exhaustive_vs_oracle():
    for g in ATLAS:
        mine = features.closeness(g)
        want = oracle_closeness(g)
        assert np.array_equal(mine, want), g.edges


def test_pagerank_exhaustive_vs_dense_oracle():
    for g in ATLAS:
        mine = features.pagerank(g)
        want = oracle_pagerank(g, iters=2000)
        assert np.abs(mine - want).max() < 1e-8, g.edges


# ---------------------------------------------------------------------------
# permutation invariance


def _permute_graph(g, perm):
    inv_edges = [(perm[u], perm[v]) for u, v in g.undirected_edges()]
    feats = np.zeros_like(g.node_feats)
    feats[list(perm)] = g.node_feats
    return make_graph(g.num_nodes, feats, inv_edges, g.label)


def test_relabeling_permutes_features():
    rng = np.random.default_rng(5)
    for g in rng.choice(len(ATLAS), size=60, replace=False):
        g = ATLAS[int(g)]
        perm = rng.permutation(g.num_nodes)
        pg = _permute_graph(g, perm)
        for fn, tol in ((features.degree, 0.0), (features.betweenness, 0.0),
                        (features.closeness, 0.0)):
            orig = fn(g)
            permuted = fn(pg)
            assert np.abs(permuted[list(perm)] - orig).max() <= tol
        pr, prp = features.pagerank(g), features.pagerank(pg)
        assert np.abs(prp[list(perm)] - pr).max() < 1e-9


def test_classic_features_column_order():
    mat = features.classic_features(P3)
    assert mat.shape == (3, 4)
    assert mat[1].tolist() == pytest.approx([1.0, 1.0, 2.0, features.pagerank(P3)[1]])
