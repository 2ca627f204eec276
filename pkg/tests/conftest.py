import numpy as np
import pytest

from phishsim.corpus import load_manifest, split_corpus
from phishsim.embedder import ModelConfig, build_model
from phishsim.synth import make_desk_corpus
from phishsim.trainer import ImageBank

TINY = ModelConfig(
    backbone="tiny", pretrained_init=False, added_layer="none", head="global_max_pool"
)


@pytest.fixture(scope="session")
def micro_corpus(tmp_path_factory):
    """Small synthetic corpus shared by unit tests: 4 websites, 4 trusted
    pages each, 8 phishing, 6 benign."""
    root = tmp_path_factory.mktemp("micro")
    path = make_desk_corpus(
        root, n_websites=4, trusted_per_site=4, phishing_total=8, benign_total=6, seed=7
    )
    return load_manifest(path)


@pytest.fixture(scope="session")
def micro_split(micro_corpus):
    return split_corpus(
        micro_corpus, phishing_train_fraction=0.5, validation_fraction=0.4, seed=3
    )


@pytest.fixture(scope="session")
def tiny_model():
    return build_model(TINY, rng_seed=0)


@pytest.fixture(scope="session")
def bank():
    return ImageBank(capacity=128)
