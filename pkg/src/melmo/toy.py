"""A tiny fixed model and batch for whole-pipeline gradient checks."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .autodiff import check_gradients, no_grad
from .downstream import ClassifierConfig, EmotionClassifier
from .model import BiLMParameters, ModelConfig, bilm_forward, bilm_loss
from .text import Batch, TextCorpus, Vocabulary, batch_sentences

TOY_CONFIG = ModelConfig(vocab_size=20, char_dim=4, char_filters=((1, 3), (2, 4)), max_chars=8, embed_dim=8,
                         hidden_dim=8, acoustic_dim=5, max_frames=6, acoustic_layers=((2, 4), (2, 4)))
TOY_SENTENCES = (("the", "cat", "sat", "down"), ("a", "dog", "ran", "far"))


def toy_batch(seed: int = 0) -> tuple[Batch, Vocabulary]:
    """Two four-word sentences with random acoustics in one batch."""
    rng = np.random.default_rng(seed)
    vocab = Vocabulary.build([" ".join(s) for s in TOY_SENTENCES])
    acoustic = [rng.normal(size=(len(s) + 2, TOY_CONFIG.acoustic_dim, TOY_CONFIG.max_frames))
                for s in TOY_SENTENCES]
    corpus = TextCorpus.from_token_lists([list(s) for s in TOY_SENTENCES], vocab, acoustic=acoustic)
    return next(batch_sentences(corpus, 2, 8, TOY_CONFIG.max_chars)), vocab


def toy_gradcheck(seed: int = 0, max_coords: Optional[int] = None) -> dict[str, float]:
    """Max relative error per tensor for the biLM loss and the downstream loss.

    The downstream loss mixes the toy model's layer outputs through a
    ScalarMix and a small classifier; the biLM stays frozen there.
    """
    batch, _ = toy_batch(seed)
    params = BiLMParameters.init(TOY_CONFIG, seed=seed + 1, random_biases=True)
    errors = check_gradients(lambda: bilm_loss(bilm_forward(params, batch), batch), dict(params.items()),
                             max_coords=max_coords, seed=seed)

    with no_grad():
        out = bilm_forward(params, batch)
    means = np.stack([
        np.stack([np.concatenate([f.data[r, 1:n - 1], b.data[r, 1:n - 1]], axis=1).mean(axis=0)
                  for f, b in out.layers])
        for r, n in enumerate(batch.lengths[:len(TOY_SENTENCES)])
    ])
    clf = EmotionClassifier(means.shape[1], means.shape[2], ClassifierConfig(hidden=(6, 5), seed=seed))
    rng = np.random.default_rng(seed + 2)
    clf.mix.w.data = rng.normal(size=clf.mix.w.shape)
    for w, b in clf.layers:
        b.data = rng.normal(scale=0.5, size=b.shape)
    labels = rng.random((len(means), 6)) < 0.5
    errors.update(check_gradients(lambda: clf.loss(means, labels), clf.parameters(),
                                  max_coords=max_coords, seed=seed))
    for p in params.values():
        if p.grad is not None and np.any(p.grad):
            raise AssertionError(f"frozen biLM tensor {p.name} received a downstream gradient")
    return errors
