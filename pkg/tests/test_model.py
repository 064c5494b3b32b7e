import dataclasses
import math

import numpy as np
import pytest

from melmo.autodiff import Tensor, no_grad
from melmo.errors import ContractError, DimensionError, IngestionError
from melmo.model import (
    BiLMParameters,
    ModelConfig,
    bilm_forward,
    bilm_loss,
    embed_acoustic,
    embed_token,
    embed_tokens,
    fuse,
    gate_values,
    lstm_step,
    nll_sums,
    perplexity,
    reversal_index,
    run_stack,
)
from melmo.text import TextCorpus, Vocabulary, batch_sentences, to_char_map
from melmo.toy import TOY_CONFIG, toy_batch


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


@pytest.fixture(scope="module")
def toy():
    batch, vocab = toy_batch(0)
    params = BiLMParameters.init(TOY_CONFIG, seed=3, random_biases=True)
    return params, batch, vocab


# --- embedders ---------------------------------------------------------------


def test_embed_token_deterministic_and_shaped(toy):
    params, _, _ = toy
    row = to_char_map("hello", TOY_CONFIG.max_chars)
    a, b = embed_token(params, row), embed_token(params, row)
    assert a.shape == (TOY_CONFIG.embed_dim,)
    assert np.array_equal(a.data, b.data)
    many = embed_tokens(params, np.stack([row, to_char_map("x", 8), row]))
    assert np.array_equal(many.data[0], many.data[2])
    assert np.allclose(many.data[0], a.data, rtol=0, atol=1e-14)


def test_zero_conv_weights_give_projection_of_biases():
    params = BiLMParameters.init(TOY_CONFIG, seed=0)
    biases = []
    for i in range(len(TOY_CONFIG.char_filters)):
        params[f"char.conv{i}.weight"].data[:] = 0.0
        b = np.linspace(0.1, 0.9, params[f"char.conv{i}.bias"].size) * (i + 1)
        params[f"char.conv{i}.bias"].data[:] = b
        biases.append(b)
    out = embed_token(params, to_char_map("anything", 8)).data
    expected = np.concatenate(biases) @ params["char.proj.weight"].data + params["char.proj.bias"].data
    assert np.allclose(out, expected, atol=1e-14)


def test_zero_acoustics_give_zero_preactivation():
    params = BiLMParameters.init(TOY_CONFIG, seed=0)
    out = embed_acoustic(params, np.zeros((3, TOY_CONFIG.acoustic_dim, TOY_CONFIG.max_frames)))
    assert out.shape == (3, TOY_CONFIG.embed_dim)
    assert not out.data.any()
    with pytest.raises(DimensionError):
        embed_acoustic(params, np.zeros((TOY_CONFIG.acoustic_dim + 1, TOY_CONFIG.max_frames)))


def test_width_one_acoustic_cnn_is_column_permutation_invariant():
    cfg = ModelConfig(vocab_size=10, char_filters=((1, 2),), max_chars=4, embed_dim=5, acoustic_dim=3,
                      max_frames=7, acoustic_layers=((1, 6),))
    params = BiLMParameters.init(cfg, seed=1, random_biases=True)
    rng = np.random.default_rng(0)
    m = rng.normal(size=(3, 7))
    base = embed_acoustic(params, m).data
    for _ in range(20):
        perm = rng.permutation(7)
        assert np.allclose(embed_acoustic(params, m[:, perm]).data, base, atol=1e-14)


# --- gating ------------------------------------------------------------------


def test_fuse_examples():
    out = fuse(Tensor([1.0, 2.0]), Tensor([math.log(3.0), 0.0]))
    assert np.allclose(out.data, [0.75, 1.0], atol=1e-15)
    u = np.array([3.0, -1.5, 0.25])
    assert np.array_equal(fuse(Tensor(u), Tensor(np.zeros(3))).data, 0.5 * u)
    assert np.allclose(fuse(Tensor(u), Tensor(np.full(3, 50.0))).data, u, atol=1e-15)
    with pytest.raises(DimensionError):
        fuse(Tensor([1.0, 2.0]), Tensor([1.0]))


def test_fuse_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        u, v = rng.normal(size=6), rng.normal(scale=3, size=6)
        out = fuse(Tensor(u), Tensor(v)).data
        assert np.max(np.abs(out - [a * sig(b) for a, b in zip(u, v)])) < 1e-12


def test_gate_range_and_magnitude_bound(toy):
    params, batch, _ = toy
    gates = gate_values(params, batch)
    assert np.all((gates > 0) & (gates < 1))
    u = np.random.default_rng(1).normal(size=gates.shape)
    assert np.all(np.abs(fuse(Tensor(u), Tensor(np.log(gates / (1 - gates)))).data) <= np.abs(u))


# --- LSTM cell ---------------------------------------------------------------


def scalar_lstm(x, h, c, wx, wh, b):
    n = len(h)
    pre = [b[j] + sum(x[i] * wx[i, j] for i in range(len(x))) + sum(h[i] * wh[i, j] for i in range(n))
           for j in range(4 * n)]
    i_g = [sig(p) for p in pre[:n]]
    f_g = [sig(p) for p in pre[n:2 * n]]
    o_g = [sig(p) for p in pre[2 * n:3 * n]]
    g = [math.tanh(p) for p in pre[3 * n:]]
    c_new = [f_g[k] * c[k] + i_g[k] * g[k] for k in range(n)]
    h_new = [o_g[k] * math.tanh(c_new[k]) for k in range(n)]
    return np.array(h_new), np.array(c_new)


def test_lstm_step_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x, h, c = rng.normal(size=3), rng.normal(size=4), rng.normal(size=4)
        wx, wh, b = rng.normal(size=(3, 16)), rng.normal(size=(4, 16)), rng.normal(size=16)
        h_new, c_new = lstm_step(x, (h, c), Tensor(wx), Tensor(wh), Tensor(b))
        h_ref, c_ref = scalar_lstm(x, h, c, wx, wh, b)
        assert np.max(np.abs(h_new.data - h_ref)) < 1e-12
        assert np.max(np.abs(c_new.data - c_ref)) < 1e-12


def test_lstm_step_degenerate_cases():
    x = np.array([1.0, -2.0, 3.0])
    h, c = lstm_step(x, (np.zeros(2), np.zeros(2)), Tensor(np.zeros((3, 8))), Tensor(np.zeros((2, 8))),
                     Tensor(np.zeros(8)))
    assert not h.data.any()
    # huge forget bias, very negative input gate: the cell carries its memory
    b = np.zeros(8)
    b[:2], b[2:4] = -1e3, 1e3
    c0 = np.array([0.3, -0.7])
    _, c = lstm_step(x, (np.zeros(2), c0), Tensor(np.zeros((3, 8))), Tensor(np.zeros((2, 8))), Tensor(b))
    assert np.array_equal(c.data, c0)
    with pytest.raises(DimensionError):
        lstm_step(np.zeros(4), (np.zeros(2), np.zeros(2)), Tensor(np.zeros((3, 8))), Tensor(np.zeros((2, 8))),
                  Tensor(np.zeros(8)))


# --- biLM --------------------------------------------------------------------


def test_reversal_index_is_an_involution():
    idx = reversal_index(np.array([3, 5, 0, 1]), 5)
    assert np.array_equal(idx[idx], np.arange(20))
    assert list(idx[:5]) == [2, 1, 0, 3, 4]


def test_backward_stack_mirrors_forward_with_tied_weights(toy):
    params, _, vocab = toy
    tied = params.copy()
    for name in list(tied.tensors):
        if name.startswith("lstm.bwd."):
            tied.tensors[name] = Tensor(params[name.replace("bwd", "fwd")].data)
    sentence = ["the", "cat", "sat", "down"]
    corpus = TextCorpus.from_token_lists([sentence], vocab)
    reversed_corpus = TextCorpus.from_token_lists([sentence[::-1]], vocab)
    # swap <bos>/<eos> spellings so the reversed row is the exact mirror of the original
    reversed_corpus.words[0] = corpus.words[0][::-1]
    with no_grad():
        out = bilm_forward(tied, next(batch_sentences(corpus, 1, 8, 8)))
        rev = bilm_forward(tied, next(batch_sentences(reversed_corpus, 1, 8, 8)))
    for (f, _), (_, b) in zip(out.layers, rev.layers):
        assert np.allclose(b.data[0, ::-1], f.data[0], atol=1e-12)


def test_padding_leaves_loss_unchanged(toy):
    params, _, vocab = toy
    rng = np.random.default_rng(5)
    sents = [["the", "cat"], ["a", "dog", "ran", "far"]]
    ac = [rng.normal(size=(len(s) + 2, 5, 6)) for s in sents]
    corpus = TextCorpus.from_token_lists(sents, vocab, acoustic=ac)
    with no_grad():
        tight = bilm_loss(bilm_forward(params, b := next(batch_sentences(corpus, 2, 6, 8))), b).item()
        padded = bilm_loss(bilm_forward(params, b := next(batch_sentences(corpus, 5, 8, 8))), b).item()
    assert abs(tight - padded) < 1e-12


def test_minimal_sentence_scores_one_target_each_way(toy):
    params, _, vocab = toy
    corpus = TextCorpus.from_token_lists([[]], vocab)
    batch = next(batch_sentences(corpus, 1, 4, 8))
    assert batch.n_targets() == 1
    out = bilm_forward(params, batch)
    f, b, n = nll_sums(out, batch)
    assert n == 1 and f > 0 and b > 0


def test_loss_matches_scalar_oracle(toy):
    params, batch, _ = toy
    out = bilm_forward(params, batch)
    loss = bilm_loss(out, batch).item()
    total, count = 0.0, 0
    for logits, targets in ((out.fwd_logits(), batch.fwd_targets), (out.bwd_logits(), batch.bwd_targets)):
        for r in range(logits.shape[0]):
            for k in range(logits.shape[1]):
                t = targets[r, k]
                if t < 0:
                    continue
                row = logits[r, k]
                total += math.log(sum(math.exp(z) for z in row)) - row[t]
                count += 1
    assert abs(loss - total / count) < 1e-12
    f, b, n = nll_sums(out, batch)
    assert abs((f + b) / (2 * n) - loss) < 1e-12


def test_uniform_model_has_perplexity_v(toy):
    params, batch, vocab = toy
    flat = params.copy()
    flat["softmax.weight"].data[:] = 0.0
    flat["softmax.bias"].data[:] = 0.0
    assert bilm_loss(bilm_forward(flat, batch), batch).item() == pytest.approx(math.log(20), abs=1e-12)
    corpus = TextCorpus.from_token_lists([["the", "cat"], ["a"]], vocab)
    assert perplexity(flat, corpus, 2, 8) == pytest.approx(20.0, abs=1e-9)


def test_all_masked_batch_is_rejected(toy):
    params, batch, _ = toy
    b = next(batch_sentences(TextCorpus.from_token_lists([["a"]], Vocabulary(["a"])), 1, 4, 8))
    b.fwd_targets[:] = -1
    b.bwd_targets[:] = -1
    with pytest.raises(ContractError):
        bilm_loss(bilm_forward(params, b), b)


def test_softmax_is_shared_between_directions(toy):
    params, batch, _ = toy
    assert sum(1 for k in params if k.startswith("softmax.")) == 2
    f0, b0, _ = nll_sums(bilm_forward(params, batch), batch)
    bumped = params.copy()
    bumped["softmax.weight"].data += 0.1 * np.random.default_rng(0).normal(size=bumped["softmax.weight"].shape)
    f1, b1, _ = nll_sums(bilm_forward(bumped, batch), batch)
    assert f1 != f0 and b1 != b0


def test_zero_acoustics_equal_text_only_and_halve_embeddings(toy):
    _, batch, _ = toy
    params = BiLMParameters.init(TOY_CONFIG, seed=0)
    zeroed = dataclasses.replace(batch, acoustic=np.zeros_like(batch.acoustic))
    text_only = dataclasses.replace(batch, acoustic=None)
    a = bilm_loss(bilm_forward(params, zeroed), zeroed).item()
    b = bilm_loss(bilm_forward(params, text_only), text_only).item()
    assert a == b
    u = embed_tokens(params, batch.chars[0])
    v = embed_acoustic(params, np.zeros((len(u.data), 5, 6)))
    assert np.array_equal(fuse(u, v).data, 0.5 * u.data)


def test_run_stack_layer_shapes(toy):
    params, _, _ = toy
    outs = run_stack(params, "fwd", Tensor(np.ones((2, 3, TOY_CONFIG.embed_dim))))
    assert [o.shape for o in outs] == [(2, 3, 8), (2, 3, 8)]


# --- persistence -------------------------------------------------------------


def test_config_and_parameter_round_trip(tmp_path):
    TOY_CONFIG.save(tmp_path / "model.cfg")
    cfg = ModelConfig.load(tmp_path / "model.cfg")
    assert cfg == TOY_CONFIG
    params = BiLMParameters.init(cfg, seed=4)
    params.save(tmp_path / "p.ckpt")
    loaded = BiLMParameters.load(tmp_path / "p.ckpt", cfg)
    for name, t in params.items():
        assert np.array_equal(t.data, loaded[name].data)
    bigger = ModelConfig(**{**TOY_CONFIG.__dict__, "hidden_dim": 9})
    with pytest.raises(IngestionError):
        BiLMParameters.load(tmp_path / "p.ckpt", bigger)


def test_config_validation(tmp_path):
    with pytest.raises(ContractError):
        ModelConfig(vocab_size=3)
    with pytest.raises(ContractError):
        ModelConfig(vocab_size=10, max_frames=4, acoustic_layers=((3, 4), (3, 4)))
    (tmp_path / "bad.cfg").write_text("vocab_size = 10\nwings = 2\n")
    with pytest.raises(IngestionError):
        ModelConfig.load(tmp_path / "bad.cfg")


def test_full_model_gradient_check_sampled(toy):
    from melmo.autodiff import check_gradients

    params, batch, _ = toy
    errors = check_gradients(lambda: bilm_loss(bilm_forward(params, batch), batch), dict(params.items()),
                             max_coords=4)
    assert len(errors) == len(params.tensors)
    assert max(errors.values()) < 1e-4
