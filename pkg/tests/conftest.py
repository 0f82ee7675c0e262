import numpy as np
import pytest

from sparsemetric.metric import MetricConfig, MetricParams, init_identity, l2_normalize


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def unit_rows(rng, n, d, dtype=np.float64):
    return l2_normalize(rng.standard_normal((n, d))).astype(dtype)


def random_params(rng, config: MetricConfig, noise=0.5, dtype=np.float64) -> MetricParams:
    base = init_identity(config, dtype)
    return MetricParams(config, base.weights + noise * rng.standard_normal(base.weights.shape))


ALL_CONFIGS = [
    MetricConfig("cosine", 8),
    MetricConfig("diag", 8),
    MetricConfig("bdiag", 8, 2),
    MetricConfig("bdiag", 8, 4),
    MetricConfig("dense", 8),
]
