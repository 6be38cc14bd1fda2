import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from grasp import embedstore as es
from grasp.dataset import split_leave_one_out
from grasp.hae import SemanticStore


@pytest.fixture(scope="session")
def small_corpus():
    """60 users / 40 items / 4 clusters, enough structure for trend checks."""
    return es.synth_corpus(n_users=60, m_items=40, n_clusters=4, dim=8, noise=0.1, seed=7)


@pytest.fixture(scope="session")
def small_split(small_corpus):
    ds, _, _ = small_corpus
    return split_leave_one_out(ds)


@pytest.fixture(scope="session")
def small_stores(small_corpus):
    _, user_m, item_m = small_corpus
    return (
        SemanticStore(user_m, es.build_neighbor_cache(user_m, 5)),
        SemanticStore(item_m, es.build_neighbor_cache(item_m, 5)),
    )
