import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import HealthCheck, settings

from sketchnmf.bench_io import gen_synthetic

settings.register_profile(
    "default", max_examples=40, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_M():
    """60 x 48 planted rank-4 instance with light noise."""
    return gen_synthetic(60, 48, 4, 0.01, seed=3)[0]


@pytest.fixture(scope="session")
def small_sparse_M():
    rng = np.random.default_rng(7)
    return sp.random_array((50, 40), density=0.15, rng=rng, format="csr") * 3.0
