import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from melmo.acoustic import (
    STD_FLOOR,
    AcousticWordMatrix,
    FrameTrack,
    NormalizationStats,
    WordTiming,
    align,
    apply_normalizer,
    check_timings,
    fit_normalizer,
    read_features,
    read_timings,
    write_features,
    write_timings,
)
from melmo.errors import ContractError, DimensionError, IngestionError
from melmo.segments import Segment, load_segments, read_manifest, segments_corpus
from melmo.text import Vocabulary


def ramp_track(n_frames, dim=3):
    # frame i holds value i in every column
    return FrameTrack(np.repeat(np.arange(n_frames, dtype=float)[:, None], dim, axis=1))


def test_five_frame_word_has_three_zero_columns():
    track = ramp_track(20)
    word = align(track, WordTiming(0, 0.020, 0.070), max_frames=8)
    assert word.valid_frames == 5
    assert np.array_equal(word.matrix[0, :5], [2, 3, 4, 5, 6])
    assert np.all(word.matrix[:, 5:] == 0)


def test_long_word_keeps_first_frames():
    track = ramp_track(30)
    word = align(track, WordTiming(0, 0.030, 0.150), max_frames=8)
    assert word.valid_frames == 8
    assert np.array_equal(word.matrix[1], np.arange(3, 11))


def test_degenerate_selections_give_zero_matrix(caplog):
    track = ramp_track(10)
    # no frame centre inside [0.021, 0.024)
    empty = align(track, WordTiming(0, 0.021, 0.024), max_frames=4)
    assert empty.valid_frames == 0 and not empty.matrix.any()
    with caplog.at_level(logging.WARNING):
        outside = align(track, WordTiming(0, 5.0, 6.0), max_frames=4)
    assert outside.valid_frames == 0 and not outside.matrix.any()
    assert any("outside" in r.message for r in caplog.records)


def test_timing_invariants():
    with pytest.raises(ContractError):
        WordTiming(0, 0.5, 0.5)
    with pytest.raises(ContractError):
        WordTiming(0, -0.1, 0.5)
    with pytest.raises(ContractError):
        check_timings([WordTiming(0, 0.0, 0.2), WordTiming(1, 0.1, 0.3)])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=8), st.integers(2, 10))
def test_tiled_timings_use_every_frame_once(spans, max_frames):
    total = sum(spans)
    track = ramp_track(total, dim=2)
    start, used = 0, 0
    for k, n in enumerate(spans):
        word = align(track, WordTiming(k, start * 0.01, (start + n) * 0.01), max_frames)
        assert word.matrix.shape == (2, max_frames)
        assert word.valid_frames == min(n, max_frames)
        assert word.matrix[0, 0] == start
        assert not word.matrix[:, word.valid_frames:].any()
        used += word.valid_frames
        start += n
    assert used <= total
    if max(spans) <= max_frames:
        assert used == total


def test_normalizer_constant_and_two_value_features():
    feats = np.array([[5.0, 0.0], [5.0, 2.0], [5.0, 0.0], [5.0, 2.0]])
    stats = fit_normalizer([FrameTrack(feats)])
    assert np.allclose(stats.mean, [5.0, 1.0])
    assert stats.std[0] == STD_FLOOR
    assert stats.std[1] == pytest.approx(1.0)


def test_normalizer_matches_two_pass_oracle():
    rng = np.random.default_rng(0)
    tracks = [FrameTrack(rng.normal(3.0, 2.0, size=(n, 74))) for n in (50, 13, 77)]
    stats = fit_normalizer(tracks)
    rows = [row for t in tracks for row in t.features]
    n = len(rows)
    mean = [sum(r[j] for r in rows) / n for j in range(74)]
    var = [sum((r[j] - mean[j]) ** 2 for r in rows) / n for j in range(74)]
    assert np.max(np.abs(stats.mean - mean)) < 1e-10
    assert np.max(np.abs(stats.std - np.sqrt(var))) < 1e-10


def test_normalizer_errors():
    with pytest.raises(IngestionError):
        fit_normalizer([])
    stats = NormalizationStats(np.zeros(3), np.ones(3))
    with pytest.raises(DimensionError):
        apply_normalizer(AcousticWordMatrix.zeros(2, 4), stats)


def test_apply_normalizer_respects_padding_and_matches_oracle():
    rng = np.random.default_rng(1)
    stats = NormalizationStats(rng.normal(size=4), rng.uniform(0.5, 2, size=4))
    m = np.zeros((4, 6))
    m[:, :4] = rng.normal(size=(4, 4))
    m[:, 0] = stats.mean
    out = apply_normalizer(AcousticWordMatrix(m, 4), stats)
    assert np.all(out.matrix[:, 0] == 0)
    assert np.all(out.matrix[:, 4:] == 0)
    for i in range(4):
        for j in range(4):
            assert out.matrix[i, j] == pytest.approx((m[i, j] - stats.mean[i]) / stats.std[i], abs=1e-14)


def test_normalized_training_frames_are_standardised():
    rng = np.random.default_rng(2)
    track = FrameTrack(rng.normal(7.0, 3.0, size=(40, 5)))
    stats = fit_normalizer([track])
    word = apply_normalizer(align(track, WordTiming(0, 0.0, 0.4), 40), stats)
    valid = word.matrix[:, :word.valid_frames]
    assert np.max(np.abs(valid.mean(axis=1))) < 1e-6
    assert np.max(np.abs(valid.std(axis=1) - 1)) < 1e-6


def test_csv_round_trips(tmp_path):
    feats = np.random.default_rng(3).normal(size=(6, 3))
    write_features(tmp_path / "f.csv", feats)
    assert np.array_equal(read_features(tmp_path / "f.csv").features, feats)
    timings = [WordTiming(0, 0.0, 0.03), WordTiming(2, 0.03, 0.06)]
    write_timings(tmp_path / "t.csv", timings)
    assert read_timings(tmp_path / "t.csv") == timings
    (tmp_path / "bad.csv").write_text("0,x,1\n")
    with pytest.raises(IngestionError):
        read_timings(tmp_path / "bad.csv")


def _write_segment(root, seg_id, split, tokens, feats, timings, ratings=None):
    write_features(root / f"{seg_id}.csv", feats)
    write_timings(root / f"{seg_id}.t.csv", timings)
    return {"id": seg_id, "split": split, "tokens": tokens, "feature_file": f"{seg_id}.csv",
            "timing_file": f"{seg_id}.t.csv", "ratings": ratings}


def test_load_segments_fits_on_train_and_zeroes_untimed(tmp_path):
    train = _write_segment(tmp_path, "a", "train", ["Hi", "there"], np.array([[0.0], [2.0], [0.0], [2.0]]),
                           [WordTiming(0, 0.0, 0.02), WordTiming(1, 0.02, 0.04)], [2, 0, 0, 0, 0, 3])
    test = _write_segment(tmp_path, "b", "test", ["x", "y"], np.array([[100.0], [100.0]]),
                          [WordTiming(0, 0.0, 0.02)])
    with open(tmp_path / "m.jsonl", "w") as fh:
        for rec in (train, test):
            fh.write(json.dumps(rec) + "\n")
    segments, stats = load_segments(tmp_path / "m.jsonl", max_frames=3)
    assert stats.mean[0] == pytest.approx(1.0) and stats.std[0] == pytest.approx(1.0)
    a, b = segments
    assert a.tokens == ["hi", "there"]
    assert np.allclose(a.acoustic[0, 0], [-1, 1, 0])
    assert list(b.valid_frames) == [2, 0]
    assert not b.acoustic[1].any()
    assert b.ratings is None

    vocab = Vocabulary.build(["hi there x y"])
    corpus = segments_corpus(segments, vocab, "train")
    assert corpus.acoustic[0].shape == (4, 1, 3)
    assert not corpus.acoustic[0][0].any() and not corpus.acoustic[0][-1].any()


def test_manifest_errors(tmp_path):
    (tmp_path / "m.jsonl").write_text('{"id": "a"}\n')
    with pytest.raises(IngestionError):
        read_manifest(tmp_path / "m.jsonl")
    (tmp_path / "e.jsonl").write_text("\n")
    with pytest.raises(IngestionError):
        read_manifest(tmp_path / "e.jsonl")


def test_segment_rating_validation():
    with pytest.raises(ContractError):
        Segment("a", "train", ["x"], np.zeros((1, 2, 3)), np.zeros(1), [0, 0, 0, 0, 0, 4])
    with pytest.raises(ContractError):
        Segment("a", "dev", ["x"], np.zeros((1, 2, 3)), np.zeros(1))
