import numpy as np
import pytest

from multihop.graph import WeightedGraph


def random_graph(rng: np.random.Generator, n: int, p: float, low: float = 0.0, high: float = 1.0) -> WeightedGraph:
    """Erdos-Renyi style weighted graph; weights uniform in (low, high]."""
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p:
                w = high - rng.random() * (high - low)
                edges.append((i, j, float(w)))
    return WeightedGraph.from_edges(n, edges)


@pytest.fixture
def rng():
    return np.random.default_rng(0xC0FFEE)
