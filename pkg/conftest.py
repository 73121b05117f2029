"""
Shared fixtures: a tiny encoder, its vocabulary and small synthetic datasets
"""

import os

import pytest

from corpus import gen_mlm_corpus, gen_sentiment, lexicon
from encoder import init_model
from models import EncoderConfig
from vocab import build_vocab


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: slow learning checks, run with RUN_ACCEPTANCE=1")


def pytest_collection_modifyitems(config, items):
    if os.getenv("RUN_ACCEPTANCE") == "1":
        return
    skip = pytest.mark.skip(reason="set RUN_ACCEPTANCE=1 to run")
    for item in items:
        if "acceptance" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def vocab():
    """Covers every word the synthetic generators and templates emit"""
    return build_vocab(lexicon(), 10_000)


@pytest.fixture(scope="session")
def tiny_config(vocab):
    return EncoderConfig(
        vocab_size=len(vocab),
        pseudotoken_capacity=32,
        d_model=16,
        n_layers=2,
        n_heads=2,
        d_ff=32,
        max_seq=32,
    )


@pytest.fixture
def tiny_model(tiny_config, vocab):
    return init_model(tiny_config, seed=7, vocab=vocab)


@pytest.fixture(scope="session")
def sentiment():
    return gen_sentiment(200, seed=7)


@pytest.fixture(scope="session")
def mlm_corpus():
    return gen_mlm_corpus(200, seed=7)
