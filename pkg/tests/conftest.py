import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from elasticlm import pruning
from elasticlm.model import ElasticModel, ModelConfig

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TINY = ModelConfig(n_layers=2, d_model=16, n_heads=4, head_dim=4, d_ff=32, vocab_size=256,
                   max_len=24, n_rel_heads=4, rel_head_dim=4)


def random_submap(config, seed=0, levels=pruning.PRESERVING_LEVELS):
    rng = np.random.default_rng(seed)
    scores = pruning.ExpressiveScores(rng.random((config.n_layers, config.n_heads)),
                                      rng.random((config.n_layers, config.d_ff)), 1)
    return pruning.derive_submap(scores, levels)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_model():
    model = ElasticModel.init(TINY, seed=3, std=0.2)
    return model.with_submap(random_submap(TINY, seed=5))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
