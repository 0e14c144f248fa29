import random

import numpy as np
import pytest

from mtparser.model import ModelConfig
from mtparser.synthetic import ToyGrammar
from mtparser.treebank_io import Sentence, TaskSpec, Token, Treebank

# small enough for fast training, large enough to learn the toy grammar
SMALL = ModelConfig(char_dim=8, pos_dim=8, rel_dim=8, act_dim=8, char_hidden=8, token_dim=16,
                    stack_dim=16, buffer_dim=16, action_dim=16, state_dim=16, task_dim=4)
TINY = ModelConfig(char_dim=4, pos_dim=3, rel_dim=3, act_dim=3, char_hidden=3, token_dim=5,
                   stack_dim=4, buffer_dim=4, action_dim=4, state_dim=4, task_dim=2)


def make_sentence(heads, rels=None, forms=None, pos=None):
    n = len(heads)
    rels = rels or ["root" if h == 0 else "dep" for h in heads]
    forms = forms or [f"w{i}" for i in range(1, n + 1)]
    pos = pos or ["NOUN"] * n
    return Sentence(tuple(Token(i + 1, forms[i], pos[i], heads[i], rels[i]) for i in range(n)))


def two_tasks(n_src=20, n_tgt=10, seed=0, src_scheme="conll", tgt_scheme="univ"):
    g = ToyGrammar(seed)
    src = TaskSpec(0, g.treebank(n_src, seed + 1, src_scheme), role="source", weight=0.5)
    tgt = TaskSpec(1, g.treebank(n_tgt, seed + 2, tgt_scheme), dev=g.treebank(5, seed + 3, tgt_scheme),
                   role="primary", weight=0.5)
    return [src, tgt]


@pytest.fixture
def small_config():
    return SMALL


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def pyrng():
    return random.Random(1234)


# "the price was disclosed" with UD arcs
PASSIVE_SENTENCE = make_sentence([2, 4, 4, 0], ["det", "nsubjpass", "auxpass", "root"],
                             ["the", "price", "was", "disclosed"], ["DET", "NOUN", "AUX", "VERB"])


@pytest.fixture
def passive_sentence():
    return PASSIVE_SENTENCE


@pytest.fixture
def passive_treebank():
    return Treebank([PASSIVE_SENTENCE], "passive")
