import numpy as np
import pytest

from app.models.run_config import RunConfig
from app.services.corpus import generate_corpus
from app.services.embeddings import HashEmbeddingProvider
from config import MicroConfig, SmokeConfig


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run slow directional experiments')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def micro_config():
    return RunConfig.from_config_class(MicroConfig).with_overrides(max_positions=48).validate()


@pytest.fixture
def smoke_config():
    return RunConfig.from_config_class(SmokeConfig).validate()


@pytest.fixture
def provider():
    return HashEmbeddingProvider(dim=6, seed=0)


@pytest.fixture(scope='session')
def tiny_corpus():
    return generate_corpus(4, 5, (3, 3), seed=1, k=3)

