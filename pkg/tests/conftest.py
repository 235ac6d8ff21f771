import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from aimfuse.kgdata import SyntheticConfig, generate_synthetic

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_bench():
    """Planted-rule benchmark small enough for per-test training runs."""
    return generate_synthetic(SyntheticConfig(drugs=20, events=4, pairs=120, bio_entities=12,
                                              bio_relations=3, sub_entities=10, lm_dim=8), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
