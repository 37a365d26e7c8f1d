"""Classic node centralities used as ranking baselines.

All three are deterministic functions of the graph structure: power-iteration
PageRank, per-component closeness over BFS distances, and exact Brandes
betweenness (undirected, each pair counted once).
"""

from __future__ import annotations

from collections import deque

import numpy as np

from .graph import Graph


def pagerank(g: Graph, damping: float = 0.85, tol: float = 1e-10,
             max_iter: int = 100_000) -> np.ndarray:
    """Power iteration until the L1 change drops below ``tol``.

    Dangling (degree-0) nodes spread their mass uniformly, so the scores sum
    to 1.
    """
    n = g.num_nodes
    deg = g.degrees().astype(np.float64)
    src = np.repeat(np.arange(n, dtype=np.int64), g.degrees())
    dst = g.targets
    dangling = deg == 0
    rank = np.full(n, 1.0 / n)
    base = (1.0 - damping) / n
    for _ in range(max_iter):
        share = np.where(dangling, 0.0, rank / np.maximum(deg, 1.0))
        nxt = base + damping * (np.bincount(dst, weights=share[src], minlength=n)
                                + rank[dangling].sum() / n)
        if np.abs(nxt - rank).sum() < tol:
            return nxt
        rank = nxt
    return rank


def _bfs_distances(g: Graph, source: int) -> np.ndarray:
    """Unweighted distances from source; unreachable nodes get -1."""
    dist = np.full(g.num_nodes, -1, dtype=np.int64)
    dist[source] = 0
    frontier = np.array([source], dtype=np.int64)
    d = 0
    while frontier.size:
        d += 1
        starts = g.offsets[frontier]
        sizes = g.offsets[frontier + 1] - starts
        if sizes.sum() == 0:
            break
        nxt = np.concatenate([g.targets[s:s + z] for s, z in zip(starts, sizes)])
        nxt = np.unique(nxt)
        nxt = nxt[dist[nxt] < 0]
        dist[nxt] = d
        frontier = nxt
    return dist


def closeness(g: Graph) -> np.ndarray:
    """Per-component closeness: (|component|-1) / sum of distances inside it.

    Isolated nodes score 0; scores are always finite.
    """
    n = g.num_nodes
    out = np.zeros(n)
    for v in range(n):
        dist = _bfs_distances(g, v)
        reachable = dist > 0
        total = dist[reachable].sum()
        if total > 0:
            out[v] = reachable.sum() / total
    return out


def betweenness(g: Graph) -> np.ndarray:
    """Brandes' exact algorithm; each unordered pair contributes once."""
    n = g.num_nodes
    score = np.zeros(n)
    for s in range(n):
        stack: list[int] = []
        preds: list[list[int]] = [[] for _ in range(n)]
        sigma = np.zeros(n)
        sigma[s] = 1.0
        dist = np.full(n, -1, dtype=np.int64)
        dist[s] = 0
        queue = deque([s])
        while queue:
            v = queue.popleft()
            stack.append(v)
            for w in g.neighbors(v):
                if dist[w] < 0:
                    dist[w] = dist[v] + 1
                    queue.append(w)
                if dist[w] == dist[v] + 1:
                    sigma[w] += sigma[v]
                    preds[w].append(v)
        delta = np.zeros(n)
        while stack:
            w = stack.pop()
            for v in preds[w]:
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w])
            if w != s:
                score[w] += delta[w]
    return score / 2.0
