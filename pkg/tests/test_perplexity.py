"""Perplexity against analytic targets: a known Markov chain and a memorised corpus."""

import math

import numpy as np
import pytest

from melmo.model import BiLMParameters, ModelConfig, perplexity
from melmo.synth import make_words
from melmo.text import TextCorpus, Vocabulary
from melmo.training import TrainConfig, train_stage1

N_WORDS = 47  # plus <bos>, <eos>, <unk> gives V = 50
STOP = 0.15
SUCCESSORS = 3


def make_chain(rng):
    table = np.zeros((N_WORDS, N_WORDS))
    for i in range(N_WORDS):
        table[i, rng.choice(N_WORDS, SUCCESSORS, replace=False)] = rng.dirichlet(np.full(SUCCESSORS, 2.0))
    values, vectors = np.linalg.eig(table.T)
    pi = np.real(vectors[:, np.argmin(np.abs(values - 1))])
    return table, pi / pi.sum()


def closed_form_perplexity(table, pi, q):
    """Per-token perplexity of a stationary chain with geometric stopping, scoring <eos> too.

    A sentence scores 1/q + 1 targets in expectation: the start draw costs
    H(pi), each of the 1/q - 1 transitions costs H_T - log(1 - q) and the
    stop costs -log q. The reversed chain has the same entropy rate under
    stationarity, so both directions agree.
    """
    h_pi = -sum(p * math.log(p) for p in pi if p > 0)
    h_t = -sum(pi[i] * t * math.log(t) for i in range(len(pi)) for t in table[i] if t > 0)
    length = 1 / q
    return math.exp((h_pi + (length - 1) * (h_t - math.log(1 - q)) - math.log(q)) / (length + 1))


def sample(table, pi, q, n, rng):
    out = []
    for _ in range(n):
        s = [int(rng.choice(N_WORDS, p=pi))]
        while rng.random() > q:
            s.append(int(rng.choice(N_WORDS, p=table[s[-1]])))
        out.append(s)
    return out


def true_model_perplexity(table, pi, q, sentences):
    """Direction-averaged perplexity of the generating chain itself on ``sentences``."""
    fwd = bwd = 0.0
    count = 0
    for s in sentences:
        steps = [math.log((1 - q) * table[a, b]) for a, b in zip(s, s[1:])]
        fwd -= math.log(pi[s[0]]) + sum(steps) + math.log(q)
        # reversed chain: P(a | b) = pi(a) T(a, b) / pi(b)
        back = [math.log((1 - q) * pi[a] * table[a, b] / pi[b]) for a, b in zip(s, s[1:])]
        bwd -= math.log(pi[s[-1]]) + sum(back) + math.log(q)
        count += len(s) + 1
    return 0.5 * (math.exp(fwd / count) + math.exp(bwd / count))


@pytest.fixture(scope="module")
def chain():
    rng = np.random.default_rng(0)
    table, pi = make_chain(rng)
    words = make_words(N_WORDS, rng)
    return table, pi, words, rng


def test_closed_form_matches_the_generating_chain(chain):
    table, pi, _, _ = chain
    held_out = sample(table, pi, STOP, 20_000, np.random.default_rng(9))
    oracle = closed_form_perplexity(table, pi, STOP)
    assert abs(true_model_perplexity(table, pi, STOP, held_out) / oracle - 1) < 0.01


def test_bigram_corpus_reaches_the_entropy_oracle(chain):
    table, pi, words, rng = chain
    to_words = lambda sents: [[words[i] for i in s] for s in sents]  # noqa: E731
    train = to_words(sample(table, pi, STOP, 8000, rng))
    valid = to_words(sample(table, pi, STOP, 1000, rng))
    vocab = Vocabulary(words)
    assert len(vocab) == 50
    config = ModelConfig(vocab_size=len(vocab), char_dim=8, char_filters=((1, 8), (2, 16), (3, 16)),
                         embed_dim=32, hidden_dim=32, acoustic_dim=2, max_frames=4, acoustic_layers=((2, 2),))
    _, log = train_stage1(BiLMParameters.init(config, 0), TextCorpus.from_token_lists(train, vocab),
                          TextCorpus.from_token_lists(valid, vocab, "valid"),
                          TrainConfig(epochs=10, batch_size=16, unroll=16, base_lr=0.1))
    oracle = closed_form_perplexity(table, pi, STOP)
    assert abs(log.best_valid_ppl / oracle - 1) < 0.05


def test_memorised_deterministic_corpus_approaches_one():
    vocab = Vocabulary(["one", "two", "three"])
    corpus = TextCorpus.from_token_lists([["one", "two", "three"]] * 16, vocab)
    config = ModelConfig(vocab_size=len(vocab), char_dim=4, char_filters=((1, 4), (2, 4)), max_chars=8,
                         embed_dim=8, hidden_dim=8, acoustic_dim=2, max_frames=4, acoustic_layers=((2, 2),))
    params, _ = train_stage1(BiLMParameters.init(config, 0), corpus, corpus,
                             TrainConfig(epochs=40, batch_size=16, base_lr=0.1))
    assert perplexity(params, corpus) < 1.1
