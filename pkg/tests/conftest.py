import numpy as np
import pytest

from pocapnet.corpus import CorpusParams
from pocapnet.model import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(audio_dim=3, audio_channels=3, visual_dim=2, hidden_dim=8, num_classes=4,
                       num_stages=2, num_blocks=2, kernel_size=3, dropout_p=0.0)


@pytest.fixture
def small_corpus_params():
    return CorpusParams(seed=3, n_ops=5, audio_dim=4, visual_dim=4,
                        durations=[30, 40, 10, 40, 8, 30, 9, 20])
