"""Weighted undirected graphs and the spectral propagation operators built from them.

Graphs are immutable: edges live as sorted ``(i, j, w)`` triples with ``i < j``
and strictly positive weights (a zero weight means "no edge", so zero entries
are simply absent). Propagation matrices are sparse CSR and come in two kinds:
the self-loop renormalized adjacency used by first-order convolutions, and the
rescaled Laplacian consumed by polynomial filters.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np
import scipy.sparse as sp


class GraphError(ValueError):
    """Invalid graph construction or operator input."""


@dataclass(frozen=True)
class WeightedGraph:
    """Symmetric weighted graph over ``n`` nodes, no self-loops."""

    n: int
    edges: tuple[tuple[int, int, float], ...] = ()

    def __post_init__(self):
        if self.n < 0:
            raise GraphError(f"node count must be >= 0, got {self.n}")
        seen = set()
        for i, j, w in self.edges:
            if not (0 <= i < j < self.n):
                raise GraphError(f"edge ({i},{j}) out of range or not i<j for n={self.n}")
            if not math.isfinite(w) or w < 0:
                raise GraphError(f"weight {w} on edge ({i},{j}) must be finite and >= 0")
            if (i, j) in seen:
                raise GraphError(f"duplicate edge ({i},{j})")
            seen.add((i, j))

    @staticmethod
    def from_edges(n: int, edges: Iterable[tuple[int, int, float]]) -> "WeightedGraph":
        """Build from unordered pairs; zero-weight entries are dropped."""
        canon = {}
        for i, j, w in edges:
            i, j, w = int(i), int(j), float(w)
            if i == j:
                raise GraphError(f"self-loop on node {i}")
            if not math.isfinite(w) or w < 0:
                raise GraphError(f"weight {w} on edge ({i},{j}) must be finite and >= 0")
            a, b = (i, j) if i < j else (j, i)
            if (a, b) in canon:
                raise GraphError(f"duplicate edge ({a},{b})")
            canon[(a, b)] = w
        triples = tuple((a, b, w) for (a, b), w in sorted(canon.items()) if w > 0.0)
        return WeightedGraph(n, triples)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def adjacency_lists(self) -> list[list[tuple[int, float]]]:
        """Neighbor lists ``[(j, w), ...]`` per node, sorted by neighbor id."""
        nbrs: list[list[tuple[int, float]]] = [[] for _ in range(self.n)]
        for i, j, w in self.edges:
            nbrs[i].append((j, w))
            nbrs[j].append((i, w))
        for lst in nbrs:
            lst.sort()
        return nbrs

    def degrees(self) -> np.ndarray:
        """Weighted degree (sum of incident edge weights) per node."""
        d = np.zeros(self.n)
        for i, j, w in self.edges:
            d[i] += w
            d[j] += w
        return d

    def to_csr(self) -> sp.csr_matrix:
        if not self.edges:
            return sp.csr_matrix((self.n, self.n))
        rows, cols, vals = [], [], []
        for i, j, w in self.edges:
            rows += [i, j]
            cols += [j, i]
            vals += [w, w]
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.n, self.n))

    def to_dense(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        for i, j, w in self.edges:
            a[i, j] = w
            a[j, i] = w
        return a

    def to_json(self) -> str:
        return json.dumps({"n": self.n, "edges": [[i, j, w] for i, j, w in self.edges]})

    @staticmethod
    def from_json(text: str) -> "WeightedGraph":
        obj = json.loads(text)
        return WeightedGraph.from_edges(int(obj["n"]), obj["edges"])

    def to_dot(self, name: str = "g") -> str:
        """Undirected DOT export, edge labels rounded to 4 decimals."""
        lines = [f"graph {name} {{"]
        for v in range(self.n):
            lines.append(f"  {v};")
        for i, j, w in self.edges:
            lines.append(f'  {i} -- {j} [label="{w:.4f}"];')
        lines.append("}")
        return "\n".join(lines)


@dataclass(frozen=True)
class PropagationMatrix:
    """Sparse symmetric operator a convolution layer multiplies with.

    kind is "renormalized" (self-loop normalized adjacency) or
    "scaled-laplacian" (Laplacian mapped into [-1, 1] for polynomial filters).
    """

    n: int
    entries: sp.csr_matrix = field(repr=False)
    kind: str = "renormalized"

    def toarray(self) -> np.ndarray:
        return self.entries.toarray()

    def __matmul__(self, other: np.ndarray) -> np.ndarray:
        return self.entries @ other


def sym_renormalize(g: WeightedGraph) -> PropagationMatrix:
    """Self-loop renormalized adjacency with weighted degrees.

    Adds a unit self-loop to every node, then normalizes symmetrically by the
    resulting degrees. An isolated node keeps a 1 on the diagonal, so features
    pass through unchanged on hop graphs with disconnected nodes.
    """
    a = (g.to_csr() + sp.identity(g.n, format="csr")).tocsr()
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(deg)
    d = sp.diags(inv_sqrt)
    return PropagationMatrix(g.n, (d @ a @ d).tocsr(), kind="renormalized")


def _normalized_laplacian(g: WeightedGraph) -> sp.csr_matrix:
    """Symmetric normalized Laplacian; rows of isolated nodes are all zero."""
    deg = g.degrees()
    inv_sqrt = np.zeros(g.n)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    a = g.to_csr()
    d = sp.diags(inv_sqrt)
    lap = sp.diags(nz.astype(float)) - (d @ a @ d)
    return lap.tocsr()


def scaled_laplacian(g: WeightedGraph, lambda_max: float) -> PropagationMatrix:
    """Normalized Laplacian rescaled by ``2/lambda_max`` and shifted by -I."""
    if lambda_max <= 0:
        raise GraphError(f"lambda_max must be positive, got {lambda_max}")
    lap = _normalized_laplacian(g)
    scaled = (2.0 / lambda_max) * lap - sp.identity(g.n, format="csr")
    return PropagationMatrix(g.n, scaled.tocsr(), kind="scaled-laplacian")


class LambdaMaxEstimate(NamedTuple):
    value: float
    converged: bool
    iterations: int

    def __float__(self) -> float:
        return self.value


def estimate_lambda_max(g: WeightedGraph, iters: int = 100, tol: float = 1e-6) -> LambdaMaxEstimate:
    """Power-iteration estimate of the largest normalized-Laplacian eigenvalue.

    Falls back to exactly 2.0 (the worst-case bound) for edgeless graphs and
    when the iteration does not converge; the flag in the result says which.
    """
    if g.n < 1:
        raise GraphError("graph must have at least one node")
    if not g.edges:
        return LambdaMaxEstimate(2.0, False, 0)
    lap = _normalized_laplacian(g)
    rng = np.random.default_rng(0)
    x = rng.standard_normal(g.n)
    x /= np.linalg.norm(x)
    prev = 0.0
    for it in range(1, iters + 1):
        y = lap @ x
        norm = np.linalg.norm(y)
        if norm == 0.0:
            return LambdaMaxEstimate(2.0, False, it)
        x = y / norm
        lam = float(x @ (lap @ x))
        if abs(lam - prev) < tol:
            return LambdaMaxEstimate(lam, True, it)
        prev = lam
    return LambdaMaxEstimate(2.0, False, iters)
