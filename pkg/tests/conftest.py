import numpy as np
import pytest

from qlmm.model_core import Cluster, ClusteredDataset


def make_dataset(rng, n=4, m=3, p=5, q=2, unequal=False):
    """Random well-formed dataset; unequal=True varies cluster sizes."""
    clusters = []
    for i in range(n):
        mi = m + (i % 3 if unequal else 0)
        clusters.append(
            Cluster(
                id=i,
                y=rng.standard_normal(mi),
                X=rng.standard_normal((mi, p)),
                Z=rng.standard_normal((mi, q)),
            )
        )
    return ClusteredDataset(clusters)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
