"""Construction of weighted k-hop graphs by max-weight simple-path search.

A pair (v, u) is connected in the k-hop graph when a simple path of exactly k
edges joins them; the edge weight is the best path's weight sum divided by k².
With exact-distance filtering on (the default) pairs whose unweighted hop
distance differs from k are dropped, which makes the hop graphs pairwise
support-disjoint.

Path weights are computed with ``math.fsum``, which is correctly rounded and
therefore independent of traversal direction: the builder, the exhaustive
oracle, and both orientations of a pair all agree bitwise.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

from multihop.graph import GraphError, WeightedGraph

DEFAULT_EXPANSION_BUDGET = 10_000_000

INFINITE_HOPS = math.inf


class ExpansionBudgetError(RuntimeError):
    """Per-source path search exceeded its node-expansion budget."""


@dataclass(frozen=True)
class HopGraphSet:
    """Ordered hop graphs for k = 1..max_hop; index 1 is the base graph."""

    base: WeightedGraph
    hops: tuple[WeightedGraph, ...]
    max_hop: int

    def __post_init__(self):
        if len(self.hops) != self.max_hop:
            raise GraphError("hop list length must equal max_hop")

    def hop(self, k: int) -> WeightedGraph:
        if not (1 <= k <= self.max_hop):
            raise GraphError(f"hop index {k} out of range 1..{self.max_hop}")
        return self.hops[k - 1]


def hop_distances(g: WeightedGraph, source: int) -> list[float]:
    """Breadth-first unweighted hop distance from ``source`` to every node.

    Unreachable nodes get ``math.inf``.
    """
    if not (0 <= source < g.n):
        raise GraphError(f"source {source} out of range for n={g.n}")
    nbrs = g.adjacency_lists()
    dist: list[float] = [INFINITE_HOPS] * g.n
    dist[source] = 0
    q = deque([source])
    while q:
        v = q.popleft()
        for u, _ in nbrs[v]:
            if math.isinf(dist[u]):
                dist[u] = dist[v] + 1
                q.append(u)
    return dist


def _bfs_depths_upto(nbrs: list[list[tuple[int, float]]], source: int, limit: int) -> dict[int, int]:
    """Hop distance from source for nodes within ``limit`` hops."""
    depth = {source: 0}
    frontier = [source]
    for d in range(1, limit + 1):
        nxt = []
        for v in frontier:
            for u, _ in nbrs[v]:
                if u not in depth:
                    depth[u] = d
                    nxt.append(u)
        frontier = nxt
        if not frontier:
            break
    return depth


def build_khop(
    g: WeightedGraph,
    k: int,
    exact_distance: bool = True,
    expansion_budget: int = DEFAULT_EXPANSION_BUDGET,
) -> WeightedGraph:
    """Weighted k-hop graph by depth-first enumeration of simple k-edge paths.

    For every endpoint pair the retained weight is the maximum over paths of
    fsum(edge weights) / k². ``exact_distance`` additionally requires the
    pair's hop distance to be exactly k. k=1 returns a copy of the base graph.

    Raises ExpansionBudgetError when one source's search exceeds
    ``expansion_budget`` node expansions (an error, never silent truncation).
    """
    if k < 1:
        raise GraphError(f"k must be >= 1, got {k}")
    if k == 1:
        return WeightedGraph(g.n, g.edges)

    nbrs = g.adjacency_lists()
    best: dict[tuple[int, int], float] = {}

    for v in range(g.n):
        if not nbrs[v]:
            continue
        reach = _bfs_depths_upto(nbrs, v, k) if exact_distance else None
        found: dict[int, float] = {}
        budget = expansion_budget
        # Iterative DFS over simple paths of exactly k edges rooted at v.
        path_nodes = [v]
        path_weights: list[float] = []
        stack = [iter(nbrs[v])]
        while stack:
            try:
                u, w = next(stack[-1])
            except StopIteration:
                stack.pop()
                path_nodes.pop()
                if path_weights:
                    path_weights.pop()
                continue
            budget -= 1
            if budget < 0:
                raise ExpansionBudgetError(
                    f"k-hop search from node {v} exceeded {expansion_budget} expansions"
                )
            if u in path_nodes:
                continue
            if len(path_weights) + 1 == k:
                if reach is None or reach.get(u) == k:
                    weight = math.fsum(path_weights + [w]) / (k * k)
                    cur = found.get(u)
                    if cur is None or weight > cur:
                        found[u] = weight
                continue
            path_nodes.append(u)
            path_weights.append(w)
            stack.append(iter(nbrs[u]))

        for u, weight in found.items():
            key = (v, u) if v < u else (u, v)
            prior = best.get(key)
            if prior is None:
                best[key] = weight
            elif prior != weight:
                # The same simple-path set seen from the other endpoint must
                # give the same maximum; fsum makes that exact.
                raise AssertionError(
                    f"asymmetric k-hop weight for pair {key}: {prior} vs {weight}"
                )

    edges = tuple((i, j, w) for (i, j), w in sorted(best.items()) if w > 0.0)
    return WeightedGraph(g.n, edges)


def khop_oracle(g: WeightedGraph, k: int, exact_distance: bool = True) -> WeightedGraph:
    """Exhaustive reference: recurse over all vertex sequences, no pruning.

    Same contract as build_khop. Guarded to n <= 14 because the sequence
    space grows factorially.
    """
    if k < 1:
        raise GraphError(f"k must be >= 1, got {k}")
    if g.n > 14:
        raise GraphError(f"oracle limited to n <= 14, got n={g.n}")
    if k == 1:
        return WeightedGraph(g.n, g.edges)

    adj = [list(row) for row in g.to_dense()]
    dist = _floyd_warshall_hops(g) if exact_distance else None
    best: dict[tuple[int, int], float] = {}

    def extend(seq: list[int]) -> None:
        if len(seq) == k + 1:
            v, u = seq[0], seq[-1]
            if dist is not None and dist[v][u] != k:
                return
            weight = math.fsum(adj[seq[t]][seq[t + 1]] for t in range(k)) / (k * k)
            key = (v, u) if v < u else (u, v)
            if weight > best.get(key, 0.0):
                best[key] = weight
            return
        last = seq[-1]
        for u in range(g.n):
            if u in seq:
                continue
            if adj[last][u] == 0.0:
                continue
            seq.append(u)
            extend(seq)
            seq.pop()

    for v in range(g.n):
        extend([v])

    edges = tuple((i, j, w) for (i, j), w in sorted(best.items()) if w > 0.0)
    return WeightedGraph(g.n, edges)


def _floyd_warshall_hops(g: WeightedGraph) -> list[list[float]]:
    """All-pairs unweighted hop distances (independent of the BFS path)."""
    n = g.n
    dist = [[INFINITE_HOPS] * n for _ in range(n)]
    for v in range(n):
        dist[v][v] = 0
    for i, j, _ in g.edges:
        dist[i][j] = 1
        dist[j][i] = 1
    for m in range(n):
        dm = dist[m]
        for i in range(n):
            dim = dist[i][m]
            if math.isinf(dim):
                continue
            di = dist[i]
            for j in range(n):
                alt = dim + dm[j]
                if alt < di[j]:
                    di[j] = alt
    return dist


def build_hop_set(
    g: WeightedGraph,
    max_hop: int,
    exact_distance: bool = True,
    expansion_budget: int = DEFAULT_EXPANSION_BUDGET,
) -> HopGraphSet:
    """Hop graphs for every k from 1 to max_hop."""
    if max_hop < 1:
        raise GraphError(f"max_hop must be >= 1, got {max_hop}")
    hops = tuple(
        build_khop(g, k, exact_distance=exact_distance, expansion_budget=expansion_budget)
        for k in range(1, max_hop + 1)
    )
    return HopGraphSet(base=g, hops=hops, max_hop=max_hop)
