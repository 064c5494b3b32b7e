"""Multimodal segments loaded from a JSON-lines manifest.

Each manifest line::

    {"id": ..., "split": "train"|"valid"|"test", "tokens": [...],
     "feature_file": ..., "timing_file": ..., "ratings": [6 floats] | null}

File paths are resolved relative to the manifest's directory.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .acoustic import (
    DEFAULT_MAX_FRAMES,
    AcousticWordMatrix,
    FrameTrack,
    NormalizationStats,
    align,
    apply_normalizer,
    fit_normalizer,
    read_features,
    read_timings,
)
from .errors import ContractError, IngestionError
from .text import TextCorpus, Vocabulary

SPLITS = ("train", "valid", "test")
REQUIRED_FIELDS = ("id", "split", "tokens", "feature_file", "timing_file")


@dataclass
class Segment:
    id: str
    split: str
    tokens: list[str]
    acoustic: np.ndarray  # [n_tokens, d, l_a]
    valid_frames: np.ndarray  # [n_tokens]
    ratings: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise ContractError(f"segment {self.id}: unknown split {self.split!r}")
        if self.acoustic.shape[0] != len(self.tokens):
            raise ContractError(f"segment {self.id}: {len(self.tokens)} tokens but {self.acoustic.shape[0]} matrices")
        if self.ratings is not None:
            self.ratings = np.asarray(self.ratings, dtype=np.float64)
            if self.ratings.shape != (6,) or np.any(self.ratings < 0) or np.any(self.ratings > 3):
                raise ContractError(f"segment {self.id}: ratings must be 6 values in [0, 3]")

    def zero_acoustics(self) -> "Segment":
        return Segment(self.id, self.split, self.tokens, np.zeros_like(self.acoustic),
                       np.zeros_like(self.valid_frames), self.ratings)


def read_manifest(path: str | os.PathLike) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestionError(f"{path}:{lineno}: not valid JSON") from exc
            missing = [k for k in REQUIRED_FIELDS if k not in rec]
            if missing:
                raise IngestionError(f"{path}:{lineno}: missing fields {missing}")
            records.append(rec)
    if not records:
        raise IngestionError(f"{path}: empty manifest")
    return records


def load_segments(
    manifest: str | os.PathLike,
    max_frames: int = DEFAULT_MAX_FRAMES,
    frame_interval: float = 0.010,
    stats: Optional[NormalizationStats] = None,
) -> tuple[list[Segment], NormalizationStats]:
    """Read, align and normalise every segment.

    Normalisation statistics are fitted on the train split unless given.
    Tokens without a timing row get an all-zero matrix.
    """
    base = os.path.dirname(os.path.abspath(manifest))
    records = read_manifest(manifest)
    tracks: dict[str, FrameTrack] = {}
    for rec in records:
        fpath = os.path.join(base, rec["feature_file"])
        if fpath not in tracks:
            tracks[fpath] = read_features(fpath, frame_interval)
    if stats is None:
        train_tracks = {os.path.join(base, r["feature_file"]) for r in records if r["split"] == "train"}
        stats = fit_normalizer(tracks[p] for p in sorted(train_tracks))

    seen: set[str] = set()
    segments = []
    for rec in records:
        if rec["id"] in seen:
            raise IngestionError(f"duplicate segment id {rec['id']!r}")
        seen.add(rec["id"])
        tokens = [tok.lower() for tok in rec["tokens"]]
        track = tracks[os.path.join(base, rec["feature_file"])]
        timings = {t.token_index: t for t in read_timings(os.path.join(base, rec["timing_file"]))}
        mats, valid = [], []
        for k in range(len(tokens)):
            word = align(track, timings[k], max_frames) if k in timings else \
                AcousticWordMatrix.zeros(track.dim, max_frames)
            word = apply_normalizer(word, stats)
            mats.append(word.matrix)
            valid.append(word.valid_frames)
        acoustic = np.stack(mats) if mats else np.zeros((0, track.dim, max_frames))
        segments.append(Segment(rec["id"], rec["split"], tokens, acoustic,
                                np.array(valid, dtype=np.int64), rec.get("ratings")))
    return segments, stats


def segments_corpus(segments: Sequence[Segment], vocab: Vocabulary, split: str,
                    with_acoustics: bool = True) -> TextCorpus:
    """Wrap segments of one split as a corpus; <bos>/<eos> get zero acoustics."""
    chosen = [s for s in segments if s.split == split]
    if not chosen:
        raise IngestionError(f"no segments in split {split!r}")
    acoustic = None
    if with_acoustics:
        acoustic = []
        for s in chosen:
            pad = np.zeros((1, *s.acoustic.shape[1:]))
            acoustic.append(np.concatenate([pad, s.acoustic, pad], axis=0))
    return TextCorpus.from_token_lists([s.tokens for s in chosen], vocab, split,
                                       acoustic=acoustic, ids=[s.id for s in chosen])
