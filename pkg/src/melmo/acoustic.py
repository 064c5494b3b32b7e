"""Frame-level acoustic features aligned to word timings.

Features arrive as precomputed frames (one row per frame, ``d`` columns);
each word gets a ``d x l_a`` matrix of the frames whose centre falls inside
its timing, zero-padded on the right.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, IngestionError

logger = logging.getLogger(__name__)

FEATURE_DIM = 74
FRAME_INTERVAL = 0.010
DEFAULT_MAX_FRAMES = 40
STD_FLOOR = 1e-8


@dataclass
class FrameTrack:
    features: np.ndarray  # [frames, d]
    frame_interval: float = FRAME_INTERVAL
    recording_id: str = ""

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DimensionError(f"frame track must be [frames, d], got {self.features.shape}")
        if self.frame_interval <= 0:
            raise ContractError("frame interval must be positive")

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    @property
    def duration(self) -> float:
        return self.n_frames * self.frame_interval


@dataclass(frozen=True)
class WordTiming:
    token_index: int
    start: float
    end: float

    def __post_init__(self) -> None:
        if not 0 <= self.start < self.end:
            raise ContractError(f"word timing needs 0 <= start < end, got ({self.start}, {self.end})")


def check_timings(timings: Sequence[WordTiming]) -> None:
    """Timings of one segment must be ordered and non-overlapping."""
    for prev, cur in zip(timings, timings[1:]):
        if cur.start < prev.end or cur.token_index <= prev.token_index:
            raise ContractError(f"overlapping or unordered timings at token {cur.token_index}")


@dataclass
class AcousticWordMatrix:
    matrix: np.ndarray  # [d, l_a]
    valid_frames: int

    def __post_init__(self) -> None:
        if self.valid_frames > self.matrix.shape[1]:
            raise ContractError("valid frame count exceeds matrix width")

    @classmethod
    def zeros(cls, dim: int, max_frames: int) -> "AcousticWordMatrix":
        return cls(np.zeros((dim, max_frames)), 0)


def frame_range(track: FrameTrack, timing: WordTiming) -> tuple[int, int]:
    """Indices ``[lo, hi)`` of frames whose centre time lies in ``[start, end)``."""
    dt = track.frame_interval
    # centre of frame i is (i + 0.5) * dt
    lo = int(np.ceil(timing.start / dt - 0.5 - 1e-9))
    hi = int(np.ceil(timing.end / dt - 0.5 - 1e-9))
    lo = min(max(lo, 0), track.n_frames)
    hi = min(max(hi, 0), track.n_frames)
    return lo, max(lo, hi)


def align(track: FrameTrack, timing: WordTiming, max_frames: int = DEFAULT_MAX_FRAMES) -> AcousticWordMatrix:
    """Word-aligned ``[d, max_frames]`` matrix; truncation keeps the first frames."""
    lo, hi = frame_range(track, timing)
    if hi <= lo:
        if timing.start >= track.duration:
            logger.warning("timing %s lies outside recording %r (%.3fs)", timing, track.recording_id, track.duration)
        return AcousticWordMatrix.zeros(track.dim, max_frames)
    hi = min(hi, lo + max_frames)
    out = np.zeros((track.dim, max_frames))
    out[:, :hi - lo] = track.features[lo:hi].T
    return AcousticWordMatrix(out, hi - lo)


@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64), STD_FLOOR)


def fit_normalizer(tracks: Iterable[FrameTrack]) -> NormalizationStats:
    frames = [t.features for t in tracks if t.n_frames]
    if not frames:
        raise IngestionError("cannot fit feature statistics on an empty training set")
    dims = {f.shape[1] for f in frames}
    if len(dims) != 1:
        raise DimensionError(f"training tracks disagree on feature dimension: {sorted(dims)}")
    stacked = np.concatenate(frames, axis=0)
    return NormalizationStats(stacked.mean(axis=0), stacked.std(axis=0))


def apply_normalizer(word: AcousticWordMatrix, stats: NormalizationStats) -> AcousticWordMatrix:
    """Z-score the valid columns; padding columns stay exactly zero."""
    if word.matrix.shape[0] != stats.mean.shape[0]:
        raise DimensionError(f"matrix has {word.matrix.shape[0]} features, stats have {stats.mean.shape[0]}")
    out = np.zeros_like(word.matrix)
    n = word.valid_frames
    out[:, :n] = (word.matrix[:, :n] - stats.mean[:, None]) / stats.std[:, None]
    return AcousticWordMatrix(out, n)


def read_features(path: str | os.PathLike, frame_interval: float = FRAME_INTERVAL) -> FrameTrack:
    try:
        data = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    except ValueError as exc:
        raise IngestionError(f"{path}: malformed feature CSV") from exc
    return FrameTrack(data, frame_interval, os.path.splitext(os.path.basename(path))[0])


def write_features(path: str | os.PathLike, features: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in features:
            writer.writerow([repr(float(v)) for v in row])


def read_timings(path: str | os.PathLike) -> list[WordTiming]:
    timings = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            try:
                timings.append(WordTiming(int(row[0]), float(row[1]), float(row[2])))
            except (IndexError, ValueError) as exc:
                raise IngestionError(f"{path}:{lineno}: bad timing row {row}") from exc
    check_timings(timings)
    return timings


def write_timings(path: str | os.PathLike, timings: Iterable[WordTiming]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for t in timings:
            writer.writerow([t.token_index, repr(float(t.start)), repr(float(t.end))])
