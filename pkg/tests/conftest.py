from __future__ import annotations

import numpy as np
import pytest

from clusterrd.core import ClusteredSample


def random_design(rng: np.random.Generator, n_clusters: int = 40, max_size: int = 5,
                  x_mode: str = "continuous", y=None) -> ClusteredSample:
    """Mixed cluster sizes; x continuous or constant within clusters."""
    sizes = rng.integers(1, max_size + 1, size=n_clusters)
    cluster = np.repeat(np.arange(n_clusters), sizes)
    if x_mode == "continuous":
        x = rng.uniform(-1, 1, cluster.size)
    else:
        x = rng.uniform(-1, 1, n_clusters)[cluster]
    y = rng.standard_normal(cluster.size) if y is None else y(x)
    return ClusteredSample(x, y, cluster, np.zeros(cluster.size, np.int64), tuple(range(n_clusters)))


def paired_design(rng: np.random.Generator, G: int = 100) -> ClusteredSample:
    """Two units per cluster sharing one running-variable value."""
    cluster = np.repeat(np.arange(G), 2)
    x = rng.uniform(-1, 1, G)[cluster]
    y = rng.standard_normal(2 * G)
    return ClusteredSample(x, y, cluster, np.zeros(2 * G, np.int64), tuple(range(G)))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240601)
