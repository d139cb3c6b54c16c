import numpy as np
import pytest

from qops.data import batchify, build_vocab, synthetic_corpus
from qops.seq2seq import ModelConfig, init_params


@pytest.fixture(scope="session")
def corpus():
    return synthetic_corpus(20, seed=0)


@pytest.fixture(scope="session")
def vocabs(corpus):
    return build_vocab(corpus, "pos"), build_vocab(corpus, "ops", strict=True)


@pytest.fixture
def ex1_cfg(vocabs):
    pv, ov = vocabs
    return ModelConfig.preset("ex1", pos_vocab_size=len(pv), op_vocab_size=len(ov))


@pytest.fixture
def ex1_params(ex1_cfg):
    return init_params(ex1_cfg, seed=0)


@pytest.fixture
def batch(corpus, vocabs):
    pv, ov = vocabs
    return batchify(corpus[:4], 4, 0, pos_vocab=pv, op_vocab=ov)[0]


@pytest.fixture
def rng():
    return np.random.default_rng(0)
