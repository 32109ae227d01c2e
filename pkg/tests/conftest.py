import numpy as np
import pytest

from lstm_tsa.corpus import CorpusConfig, generate_synthetic_corpus, planted_detector
from lstm_tsa.mil import AttributeDetectors


@pytest.fixture(scope="session")
def corpus():
    return generate_synthetic_corpus(CorpusConfig())


@pytest.fixture(scope="session")
def planted(corpus):
    attrs = corpus.static_attributes + corpus.dynamic_attributes
    W, b = planted_detector(corpus, attrs)
    return AttributeDetectors(attrs, W, b)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
