"""Affinity graph construction from meta-data tables and feature similarity.

The adjacency side counts, per node pair, how many meta-data measures agree
within their thresholds. The weight side maps a feature distance through a
Gaussian kernel. The affinity graph is their elementwise product, so the
adjacency decides structure and the kernel only rescales existing edges.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import scipy.sparse as sp

from multihop.graph import GraphError, WeightedGraph


class AffinityError(ValueError):
    """Invalid affinity inputs (mismatched lengths, degenerate features...)."""


@dataclass(frozen=True)
class Measure:
    """One per-node meta-data column with its agreement threshold.

    Categorical measures are integer-coded; beta=0 then means exact match.
    """

    name: str
    values: np.ndarray
    beta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if self.values.ndim != 1:
            raise AffinityError(f"measure {self.name!r} must be 1-D")
        if self.beta < 0:
            raise AffinityError(f"measure {self.name!r} has negative beta {self.beta}")


@dataclass(frozen=True)
class MetaTable:
    n: int
    measures: tuple[Measure, ...]

    def __post_init__(self):
        for m in self.measures:
            if len(m.values) != self.n:
                raise AffinityError(
                    f"measure {m.name!r} has {len(m.values)} values, expected {self.n}"
                )


@dataclass(frozen=True)
class AffinityConfig:
    """How feature distances become edge weights.

    distance: "correlation" (1 - Pearson) or "l1". sigma: kernel width, or
    None to use the mean distance over the scored pairs. betas optionally
    override per-measure thresholds by name.
    """

    distance: str = "correlation"
    sigma: float | None = None
    betas: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.distance not in ("correlation", "l1"):
            raise AffinityError(f"unknown distance {self.distance!r}")
        if self.sigma is not None and self.sigma <= 0:
            raise AffinityError(f"sigma must be positive, got {self.sigma}")


def meta_adjacency(meta: MetaTable) -> WeightedGraph:
    """Count of agreeing measures per node pair (|difference| <= beta).

    Weights are integers in {1, ..., #measures} stored as reals; pairs with
    no agreeing measure get no edge.
    """
    if meta.n < 1:
        raise AffinityError("meta table must cover at least one node")
    counts = np.zeros((meta.n, meta.n))
    for m in meta.measures:
        diff = np.abs(m.values[:, None] - m.values[None, :])
        counts += (diff <= m.beta).astype(float)
    iu, ju = np.triu_indices(meta.n, k=1)
    vals = counts[iu, ju]
    nz = vals > 0
    return WeightedGraph(meta.n, tuple(zip(iu[nz].tolist(), ju[nz].tolist(), vals[nz].tolist())))


def _pair_distances(features, pairs: np.ndarray, distance: str, chunk: int = 4096) -> np.ndarray:
    """Distance per requested pair; never materializes the full pairwise kernel."""
    dense = features.toarray() if sp.issparse(features) else np.asarray(features, dtype=float)
    if distance == "correlation":
        touched = np.unique(pairs)
        bad = touched[dense[touched].std(axis=1) == 0]
        if bad.size:
            raise AffinityError(
                f"constant feature row for node {int(bad[0])}: correlation distance undefined"
            )
    out = np.empty(len(pairs))
    for lo in range(0, len(pairs), chunk):
        block = pairs[lo : lo + chunk]
        xi = dense[block[:, 0]]
        xj = dense[block[:, 1]]
        if distance == "l1":
            out[lo : lo + chunk] = np.abs(xi - xj).sum(axis=1)
        else:
            ci = xi - xi.mean(axis=1, keepdims=True)
            cj = xj - xj.mean(axis=1, keepdims=True)
            denom = np.linalg.norm(ci, axis=1) * np.linalg.norm(cj, axis=1)
            out[lo : lo + chunk] = 1.0 - (ci * cj).sum(axis=1) / denom
    return out


def feature_edge_weights(
    features,
    edges: Iterable[tuple[int, int]] | WeightedGraph,
    cfg: AffinityConfig = AffinityConfig(),
) -> WeightedGraph:
    """Gaussian-kernel similarity weights on the requested pairs only.

    exp(-d² / (2 σ²)) with d the configured distance; sigma=None uses the
    mean distance over the requested pairs.
    """
    if isinstance(edges, WeightedGraph):
        n = edges.n
        pair_list = [(i, j) for i, j, _ in edges.edges]
    else:
        pair_list = sorted({(min(i, j), max(i, j)) for i, j in edges})
        n = features.shape[0]
    for i, j in pair_list:
        if not (0 <= i < n and 0 <= j < n) or i == j:
            raise AffinityError(f"pair ({i},{j}) invalid for n={n}")
    if not pair_list:
        return WeightedGraph(n, ())
    if features.shape[0] < n:
        raise AffinityError(f"feature matrix covers {features.shape[0]} nodes, need {n}")

    pairs = np.asarray(pair_list, dtype=int)
    d = _pair_distances(features, pairs, cfg.distance)
    sigma = cfg.sigma if cfg.sigma is not None else float(d.mean())
    if sigma == 0.0:
        # all requested pairs are at distance zero; the kernel limit is 1
        w = np.ones_like(d)
    else:
        w = np.exp(-(d**2) / (2.0 * sigma**2))
    return WeightedGraph(n, tuple((i, j, float(wv)) for (i, j), wv in zip(pair_list, w)))


def build_affinity(adjacency: WeightedGraph, weights: WeightedGraph) -> WeightedGraph:
    """Elementwise product of the two graphs over the adjacency's support.

    Every adjacency edge must have a weight entry (the weight graph's support
    is a superset); edges whose product is zero disappear.
    """
    if adjacency.n != weights.n:
        raise GraphError(
            f"node count mismatch: adjacency n={adjacency.n}, weights n={weights.n}"
        )
    wmap = {(i, j): w for i, j, w in weights.edges}
    out = []
    for i, j, a in adjacency.edges:
        if (i, j) not in wmap:
            raise AffinityError(f"no weight for adjacency edge ({i},{j})")
        prod = a * wmap[(i, j)]
        if prod > 0.0:
            out.append((i, j, prod))
    return WeightedGraph(adjacency.n, tuple(out))
