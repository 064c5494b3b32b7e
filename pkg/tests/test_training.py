import math

import numpy as np
import pytest

from melmo.autodiff import Tensor
from melmo.errors import ContractError, NumericAbort
from melmo.model import BiLMParameters, ModelConfig, perplexity
from melmo.text import TextCorpus, Vocabulary
from melmo.training import (
    Optimizer,
    TrainConfig,
    TrainLog,
    clip_by_global_norm,
    sgd_step,
    train_stage,
    train_stage1,
    train_stage2,
)

SMALL = dict(char_dim=4, char_filters=((1, 4), (2, 4)), max_chars=10, embed_dim=8, hidden_dim=8,
             acoustic_dim=3, max_frames=4, acoustic_layers=((2, 4),))


@pytest.fixture(scope="module")
def corpora():
    rng = np.random.default_rng(0)
    words = ["ab", "cd", "ef", "gh", "ij", "kl"]
    sents = [[words[i] for i in rng.integers(0, 6, size=rng.integers(2, 6))] for _ in range(24)]
    vocab = Vocabulary(words)
    acoustic = [rng.normal(size=(len(s) + 2, 3, 4)) for s in sents]
    train = TextCorpus.from_token_lists(sents[:18], vocab, acoustic=acoustic[:18])
    valid = TextCorpus.from_token_lists(sents[18:], vocab, "valid", acoustic=acoustic[18:])
    params = BiLMParameters.init(ModelConfig(vocab_size=len(vocab), **SMALL), seed=0)
    return params, train, valid


def strip_clock(log):
    return [{k: v for k, v in r.items() if k != "wall_clock"} for r in log.records]


# --- config ------------------------------------------------------------------


def test_learning_rate_ratio_and_defaults():
    assert TrainConfig().epochs == 10
    mm = TrainConfig(stage="multimodal", base_lr=0.5)
    assert mm.epochs == 5
    assert mm.learning_rate == pytest.approx(0.05)
    assert TrainConfig(stage="multimodal", lr=0.2).learning_rate == 0.2
    with pytest.raises(ContractError):
        TrainConfig(stage="joint")
    with pytest.raises(ContractError):
        TrainConfig(optimizer="adam")
    with pytest.raises(ContractError):
        TrainConfig(clip=0)


# --- optimizer steps ---------------------------------------------------------


def test_sgd_step_examples():
    p = {"w": np.array([1.0])}
    assert sgd_step(p, {"w": np.array([0.0])}, 0.1, 5.0)["w"][0] == 1.0
    assert sgd_step(p, {"w": np.array([2.0])}, 0.1, 5.0)["w"][0] == pytest.approx(0.8, abs=1e-15)


def test_clipped_update_norm_equals_lr():
    rng = np.random.default_rng(0)
    g = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=5)}
    norm = math.sqrt(sum(float((v ** 2).sum()) for v in g.values()))
    g = {k: v * 10.0 / norm for k, v in g.items()}
    p = {k: np.zeros_like(v) for k, v in g.items()}
    new = sgd_step(p, g, 0.3, 1.0)
    step = math.sqrt(sum(float(((new[k] - p[k]) ** 2).sum()) for k in p))
    assert step == pytest.approx(0.3, abs=1e-12)


def test_non_finite_gradient_aborts():
    with pytest.raises(NumericAbort):
        clip_by_global_norm({"w": np.array([np.nan])}, 1.0)


def test_adagrad_first_step_is_normalised():
    w = Tensor(np.array([1.0, 1.0]), requires_grad=True)
    w.grad = np.array([0.5, -2.0])
    Optimizer("adagrad", lr=0.1, clip=10.0, initial_accumulator=0.0).step({"w": w})
    assert np.allclose(w.data, [0.9, 1.1], atol=1e-15)


# --- stages ------------------------------------------------------------------


def test_zero_lr_leaves_parameters_bit_identical(corpora):
    params, train, valid = corpora
    out, log = train_stage1(params, train, valid, TrainConfig(epochs=1, lr=0.0))
    assert len(log.records) == 1
    for name, t in params.items():
        assert np.array_equal(t.data, out[name].data)


def test_fixed_seed_gives_identical_logs_and_checkpoints(corpora, tmp_path):
    params, train, valid = corpora
    cfg = TrainConfig(epochs=2, batch_size=4, seed=3)
    _, a = train_stage1(params, train, valid, cfg, str(tmp_path / "a"))
    _, b = train_stage1(params, train, valid, cfg, str(tmp_path / "b"))
    assert strip_clock(a) == [{**r, "checkpoint": r["checkpoint"].replace("/b/", "/a/")} for r in strip_clock(b)]
    for name in ("best.ckpt", "last.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    on_disk = TrainLog.read(tmp_path / "a" / "train_log.jsonl")
    assert strip_clock(on_disk) == strip_clock(a)


def test_training_reduces_validation_perplexity(corpora):
    params, train, valid = corpora
    before = perplexity(params, valid, 8, 16)
    _, log = train_stage1(params, train, valid, TrainConfig(epochs=3, batch_size=4))
    assert log.best_valid_ppl < before


def test_checkpoint_round_trip_preserves_perplexity(corpora, tmp_path):
    params, train, valid = corpora
    trained, _ = train_stage1(params, train, valid, TrainConfig(epochs=1, batch_size=4), str(tmp_path))
    loaded = BiLMParameters.load(tmp_path / "best.ckpt", params.config)
    assert abs(perplexity(trained, valid) - perplexity(loaded, valid)) < 1e-12


def test_zero_acoustic_stage2_matches_continued_stage1(corpora):
    params, train, valid = corpora
    zero = TextCorpus(train.sentences, train.words, train.vocab, "train",
                      acoustic=[np.zeros_like(a) for a in train.acoustic])
    zero_valid = TextCorpus(valid.sentences, valid.words, valid.vocab, "valid",
                            acoustic=[np.zeros_like(a) for a in valid.acoustic])
    _, mm = train_stage2(params, zero, zero_valid, TrainConfig(stage="multimodal", epochs=2, batch_size=4))
    _, text = train_stage1(params, zero, zero_valid, TrainConfig(epochs=2, batch_size=4, lr=0.003))
    assert [r["train_loss"] for r in mm.records] == [r["train_loss"] for r in text.records]
    assert [r["valid_ppl"] for r in mm.records] == [r["valid_ppl"] for r in text.records]


def test_stage_guards(corpora):
    params, train, valid = corpora
    with pytest.raises(ContractError):
        train_stage1(params, train, valid, TrainConfig(stage="multimodal"))
    with pytest.raises(ContractError):
        train_stage2(params, train, valid, TrainConfig())
    with pytest.raises(ContractError):
        train_stage2(params, train.without_acoustics(), valid, TrainConfig(stage="multimodal"))


def test_text_only_stage_never_sees_acoustics(corpora):
    params, train, valid = corpora
    scrambled = TextCorpus(train.sentences, train.words, train.vocab, "train",
                           acoustic=[a * 100 for a in train.acoustic])
    _, a = train_stage1(params, train, valid, TrainConfig(epochs=1, batch_size=4))
    _, b = train_stage1(params, scrambled, valid, TrainConfig(epochs=1, batch_size=4))
    assert strip_clock(a) == strip_clock(b)


def test_frozen_acoustic_path_stays_put(corpora):
    params, train, valid = corpora
    out, _ = train_stage(params, train, valid,
                         TrainConfig(stage="multimodal", epochs=1, batch_size=4, freeze_acoustic=True))
    for name, t in params.items():
        if name.startswith("acoustic."):
            assert np.array_equal(t.data, out[name].data)
    assert not np.array_equal(params["softmax.weight"].data, out["softmax.weight"].data)


def test_nan_loss_aborts(corpora):
    params, train, valid = corpora
    broken = params.copy()
    broken["softmax.bias"].data[0] = np.nan
    with pytest.raises(NumericAbort):
        train_stage1(broken, train, valid, TrainConfig(epochs=1))
