"""Per-node graph statistics: betweenness, closeness, degree, pagerank.

These form the deterministic part of the "classic" generator input. All
four use the normalized textbook definitions so their magnitudes stay
O(1) next to the uniform noise they are concatenated with; degree is the
exception and is passed raw.
"""

from __future__ import annotations

from collections import deque

import numpy as np

FEATURE_NAMES = ("betweenness", "closeness", "degree", "pagerank")


class PagerankError(RuntimeError):
    """Power iteration failed to converge; carries the last L1 residual."""

    def __init__(self, residual, max_iter):
        self.residual = residual
        super().__init__(f"pagerank did not converge after {max_iter} iterations "
                         f"(last L1 residual {residual:.3e})")


def _adjacency_lists(graph):
    adj = [[] for _ in range(graph.num_nodes)]
    for u, v in graph.edges:
        adj[u].append(v)
    return adj


def degree(graph) -> np.ndarray:
    """Undirected degree per node."""
    deg = np.zeros(graph.num_nodes, dtype=np.float64)
    for u, _ in graph.edges:
        deg[u] += 1.0
    return deg


def pagerank(graph, damping=0.85, tol=1e-10, max_iter=1000) -> np.ndarray:
    """Power iteration with uniform teleport; isolated nodes redistribute uniformly."""
    n = graph.num_nodes
    if n < 1:
        raise ValueError("pagerank: graph has no nodes")
    adj = _adjacency_lists(graph)
    deg = np.array([len(nbrs) for nbrs in adj], dtype=np.float64)
    dangling = deg == 0
    x = np.full(n, 1.0 / n)
    teleport = (1.0 - damping) / n
    residual = np.inf
    for _ in range(max_iter):
        nxt = np.zeros(n)
        for v, nbrs in enumerate(adj):
            if nbrs:
                share = x[v] / deg[v]
                for u in nbrs:
                    nxt[u] += share
        dangling_mass = x[dangling].sum()
        nxt += dangling_mass / n
        nxt = damping * nxt + teleport
        residual = np.abs(nxt - x).sum()
        x = nxt
        if residual < tol:
            return x
    raise PagerankError(residual, max_iter)


def betweenness(graph) -> np.ndarray:
    """Brandes accumulation over unweighted shortest paths.

    Normalized by (n-1)(n-2)/2 pairs for n >= 3 (each unordered pair is
    counted once); all zeros for smaller graphs. Path counts are integers
    and the dependency sums run in exact rationals, so the result is
    independent of node labeling down to the last bit.
    """
    from fractions import Fraction

    n = graph.num_nodes
    if n < 3:
        return np.zeros(n, dtype=np.float64)
    adj = _adjacency_lists(graph)
    bc = [Fraction(0)] * n
    for s in range(n):
        stack = []
        preds = [[] for _ in range(n)]
        sigma = [0] * n
        sigma[s] = 1
        dist = [-1] * n
        dist[s] = 0
        queue = deque([s])
        while queue:
            v = queue.popleft()
            stack.append(v)
            for w in adj[v]:
                if dist[w] < 0:
                    dist[w] = dist[v] + 1
                    queue.append(w)
                if dist[w] == dist[v] + 1:
                    sigma[w] += sigma[v]
                    preds[w].append(v)
        delta = [Fraction(0)] * n
        while stack:
            w = stack.pop()
            for v in preds[w]:
                delta[v] += Fraction(sigma[v], sigma[w]) * (1 + delta[w])
            if w != s:
                bc[w] += delta[w]
    # each pair visited from both endpoints: raw/2, then / ((n-1)(n-2)/2)
    denom = (n - 1) * (n - 2)
    return np.array([float(b / denom) for b in bc])


def closeness(graph) -> np.ndarray:
    """Reach-weighted closeness with the disconnected-graph correction.

    For node v with reachable set R(v) (v excluded) and distance sum S:
    (|R|/(n-1)) * (|R|/S); nodes reaching nothing score 0.
    """
    n = graph.num_nodes
    out = np.zeros(n, dtype=np.float64)
    if n <= 1:
        return out
    adj = _adjacency_lists(graph)
    for s in range(n):
        dist = np.full(n, -1)
        dist[s] = 0
        queue = deque([s])
        while queue:
            v = queue.popleft()
            for w in adj[v]:
                if dist[w] < 0:
                    dist[w] = dist[v] + 1
                    queue.append(w)
        reached = (dist > 0)
        r = int(reached.sum())
        if r == 0:
            continue
        total = dist[reached].sum()
        out[s] = (r / (n - 1)) * (r / total)
    return out


def classic_features(graph) -> np.ndarray:
    """num_nodes x 4 matrix ordered [betweenness, closeness, degree, pagerank]."""
    cols = (betweenness(graph), closeness(graph), degree(graph), pagerank(graph))
    return np.stack(cols, axis=1)


def standardize(feats: np.ndarray) -> np.ndarray:
    """Column-wise zero-mean unit-variance rescaling (optional config switch)."""
    mu = feats.mean(axis=0, keepdims=True)
    sd = feats.std(axis=0, keepdims=True)
    return (feats - mu) / np.maximum(sd, 1e-12)
