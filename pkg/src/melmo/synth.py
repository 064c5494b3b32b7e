"""Synthetic spoken-language corpus with tunable acoustic coupling.

Every word carries a latent prosody state. Its frames are the state's
prototype plus noise. With probability ``alpha`` a word's state is drawn
from the segment's emotions (otherwise uniformly), and with probability
``alpha`` the next word comes from a table keyed by (word, state) rather
than the plain bigram table. ``alpha = 0`` therefore makes acoustics
independent of both the text and the emotion labels.

States ``0..5`` mirror the six emotions; state 6 is neutral.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .acoustic import WordTiming, write_features, write_timings
from .errors import ContractError

N_EMOTIONS = 6
NEUTRAL = N_EMOTIONS
N_STATES = N_EMOTIONS + 1
POSITIVE_RATINGS = (4 / 3, 5 / 3, 2.0, 7 / 3, 8 / 3, 3.0)
NEGATIVE_RATINGS = (0.0, 1 / 3, 2 / 3, 1.0)

_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh", "br", "st")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "ou")


@dataclass
class SynthConfig:
    vocab_size: int = 50
    sentences: int = 2000
    min_len: int = 6
    max_len: int = 12
    acoustic_dim: int = 16
    alpha: float = 0.8
    seed: int = 0
    text_sentences: int = 2000
    min_frames: int = 4
    max_frames: int = 10
    noise: float = 0.3
    emotion_prior: float = 0.3
    bigram_successors: int = 8
    state_successors: int = 2
    frame_interval: float = 0.010

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError("alpha must lie in [0, 1]")
        if self.vocab_size < 2 or self.sentences < 1 or self.acoustic_dim < 1:
            raise ContractError("vocab_size >= 2, sentences >= 1 and acoustic_dim >= 1 are required")
        if not 1 <= self.min_len <= self.max_len or not 1 <= self.min_frames <= self.max_frames:
            raise ContractError("length and frame ranges must be non-empty")
        if not 0.0 < self.emotion_prior < 1.0:
            raise ContractError("emotion_prior must lie in (0, 1)")


@dataclass
class SynthSegment:
    id: str
    split: str
    tokens: list[str]
    states: list[int]
    emotions: list[int]
    ratings: list[float]
    features: np.ndarray
    timings: list[WordTiming]


@dataclass
class SynthData:
    config: SynthConfig
    words: list[str]
    prototypes: np.ndarray
    segments: list[SynthSegment]
    text_train: list[list[str]]
    text_valid: list[list[str]]
    bigram: np.ndarray = field(repr=False)
    state_table: np.ndarray = field(repr=False)


def make_words(n: int, rng: np.random.Generator) -> list[str]:
    pool = sorted({o + v + o2 + v2 for o, v, o2, v2 in itertools.product(_ONSETS, _VOWELS, _ONSETS, _VOWELS)})
    picked = rng.choice(len(pool), size=n, replace=False)
    return [pool[i] for i in sorted(picked)]


def _sparse_rows(n_rows: int, vocab: int, k: int, rng: np.random.Generator) -> np.ndarray:
    table = np.zeros((n_rows, vocab))
    for r in range(n_rows):
        cols = rng.choice(vocab, size=min(k, vocab), replace=False)
        table[r, cols] = rng.dirichlet(np.ones(len(cols)))
    return table


def assign_split(segment_id: str, seed: int) -> str:
    digest = hashlib.sha256(f"{seed}:{segment_id}".encode()).digest()
    u = int.from_bytes(digest[:8], "little") / 2**64
    return "train" if u < 0.70 else "valid" if u < 0.85 else "test"


def _ensure_both_classes(emotions: np.ndarray, splits: list[str], rng: np.random.Generator) -> None:
    """Flip one label where a split would otherwise hold a single class for an emotion."""
    for split in ("train", "valid", "test"):
        rows = np.flatnonzero(np.asarray(splits) == split)
        if len(rows) < 2:
            raise ContractError(f"split {split!r} gets {len(rows)} segments; raise the sentence count")
        for e in range(emotions.shape[1]):
            column = emotions[rows, e]
            if column.all() or not column.any():
                emotions[rng.choice(rows), e] = 1 - column[0]


class _Language:
    def __init__(self, config: SynthConfig, rng: np.random.Generator):
        self.config = config
        v = config.vocab_size
        self.bigram = _sparse_rows(v, v, config.bigram_successors, rng)
        self.state_table = _sparse_rows(v * N_STATES, v, config.state_successors, rng).reshape(v, N_STATES, v)

    def sentence(self, rng: np.random.Generator, emotions: np.ndarray) -> tuple[list[int], list[int]]:
        cfg = self.config
        present = np.flatnonzero(emotions)
        length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        ids = [int(rng.integers(cfg.vocab_size))]
        states = []
        for k in range(length):
            if rng.random() < cfg.alpha:
                z = int(rng.choice(present)) if len(present) else NEUTRAL
            else:
                z = int(rng.integers(N_STATES))
            states.append(z)
            if k == length - 1:
                break
            row = self.state_table[ids[-1], z] if rng.random() < cfg.alpha else self.bigram[ids[-1]]
            ids.append(int(rng.choice(cfg.vocab_size, p=row)))
        return ids, states


def generate(config: SynthConfig) -> SynthData:
    """Build the whole corpus in memory; identical configs give identical data."""
    rng = np.random.default_rng(config.seed)
    words = make_words(config.vocab_size, rng)
    prototypes = rng.normal(size=(N_STATES, config.acoustic_dim))
    lang = _Language(config, rng)

    width = len(str(config.sentences))
    seg_ids = [f"seg{s:0{width}d}" for s in range(config.sentences)]
    splits = [assign_split(seg_id, config.seed) for seg_id in seg_ids]
    label_rng = np.random.default_rng([config.seed, 3])
    all_emotions = (label_rng.random((config.sentences, N_EMOTIONS)) < config.emotion_prior).astype(int)
    _ensure_both_classes(all_emotions, splits, label_rng)

    seg_rng = np.random.default_rng([config.seed, 1])
    segments = []
    for seg_id, split, emotions in zip(seg_ids, splits, all_emotions):
        ids, states = lang.sentence(seg_rng, emotions)
        blocks, timings = [], []
        frame = int(seg_rng.integers(0, 4))
        if frame:
            blocks.append(seg_rng.normal(scale=config.noise, size=(frame, config.acoustic_dim)))
        for k, z in enumerate(states):
            n = int(seg_rng.integers(config.min_frames, config.max_frames + 1))
            blocks.append(prototypes[z] + seg_rng.normal(scale=config.noise, size=(n, config.acoustic_dim)))
            timings.append(WordTiming(k, frame * config.frame_interval, (frame + n) * config.frame_interval))
            frame += n
            gap = int(seg_rng.integers(0, 3))
            if gap:
                blocks.append(seg_rng.normal(scale=config.noise, size=(gap, config.acoustic_dim)))
                frame += gap
        ratings = [float(seg_rng.choice(POSITIVE_RATINGS) if e else seg_rng.choice(NEGATIVE_RATINGS))
                   for e in emotions]
        segments.append(SynthSegment(seg_id, split, [words[i] for i in ids],
                                     states, emotions.tolist(), ratings, np.concatenate(blocks), timings))

    text_rng = np.random.default_rng([config.seed, 2])
    texts = []
    for _ in range(config.text_sentences):
        emotions = (text_rng.random(N_EMOTIONS) < config.emotion_prior).astype(int)
        ids, _ = lang.sentence(text_rng, emotions)
        texts.append([words[i] for i in ids])
    n_valid = max(1, config.text_sentences // 10)
    return SynthData(config, words, prototypes, segments, texts[n_valid:], texts[:n_valid],
                     lang.bigram, lang.state_table)


def write(data: SynthData, out_dir: str) -> str:
    """Write manifest, per-segment CSVs, text corpora and latent states; returns the manifest path."""
    os.makedirs(os.path.join(out_dir, "features"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "timings"), exist_ok=True)
    manifest = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest, "w", encoding="utf-8") as mf, \
            open(os.path.join(out_dir, "latent.jsonl"), "w", encoding="utf-8") as lf:
        for seg in data.segments:
            feature_file = f"features/{seg.id}.csv"
            timing_file = f"timings/{seg.id}.csv"
            write_features(os.path.join(out_dir, feature_file), seg.features)
            write_timings(os.path.join(out_dir, timing_file), seg.timings)
            mf.write(json.dumps({"id": seg.id, "split": seg.split, "tokens": seg.tokens,
                                 "feature_file": feature_file, "timing_file": timing_file,
                                 "ratings": seg.ratings}) + "\n")
            lf.write(json.dumps({"id": seg.id, "states": seg.states, "emotions": seg.emotions}) + "\n")
    for name, sents in (("text.train.txt", data.text_train), ("text.valid.txt", data.text_valid)):
        with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
            for toks in sents:
                fh.write(" ".join(toks) + "\n")
    with open(os.path.join(out_dir, "synth.cfg"), "w", encoding="utf-8") as fh:
        for key, value in asdict(data.config).items():
            fh.write(f"{key} = {value}\n")
    return manifest


def gen_synth(config: SynthConfig, out_dir: str) -> SynthData:
    data = generate(config)
    write(data, out_dir)
    return data


# --- oracles over the generator's latent variables ---------------------------------


def _state_likelihood(emotions: np.ndarray, alpha: float) -> np.ndarray:
    """P(state | emotion vector) for each of the N_STATES states."""
    p = np.full(N_STATES, (1.0 - alpha) / N_STATES)
    present = np.flatnonzero(emotions)
    if len(present):
        p[present] += alpha / len(present)
    else:
        p[NEUTRAL] += alpha
    return p


def emotion_posterior(states: list[int], alpha: float, prior: float) -> np.ndarray:
    """Exact P(emotion_i present | word states) by enumerating all 2^6 emotion vectors."""
    counts = np.bincount(np.asarray(states, dtype=np.int64), minlength=N_STATES)
    post = np.zeros(N_EMOTIONS)
    total = 0.0
    for bits in itertools.product((0, 1), repeat=N_EMOTIONS):
        b = np.array(bits)
        like = _state_likelihood(b, alpha)
        seen = counts > 0
        if np.any(like[seen] == 0):
            continue
        log_w = float(np.sum(counts[seen] * np.log(like[seen])))
        log_w += float(np.sum(b * np.log(prior) + (1 - b) * np.log(1 - prior)))
        w = np.exp(log_w)
        total += w
        post += w * b
    return post / total


def decode_states(data: SynthData, seg: SynthSegment) -> list[int]:
    """Nearest-prototype state of each word from its mean frame."""
    cfg = data.config
    out = []
    for t in seg.timings:
        lo = int(round(t.start / cfg.frame_interval))
        hi = int(round(t.end / cfg.frame_interval))
        mean = seg.features[lo:hi].mean(axis=0)
        out.append(int(np.argmin(((data.prototypes - mean) ** 2).sum(axis=1))))
    return out


def bayes_label_accuracy(data: SynthData, states_from_acoustics: bool = True) -> float:
    """Accuracy of thresholding the exact emotion posterior at 0.5, over all segment/emotion pairs."""
    cfg = data.config
    hits, total = 0, 0
    for seg in data.segments:
        states = decode_states(data, seg) if states_from_acoustics else seg.states
        pred = emotion_posterior(states, cfg.alpha, cfg.emotion_prior) > 0.5
        hits += int(np.sum(pred == np.array(seg.emotions, dtype=bool)))
        total += N_EMOTIONS
    return hits / total


def _mutual_information(x: np.ndarray, y: np.ndarray) -> float:
    """Plug-in mutual information (nats) between two binary vectors."""
    mi = 0.0
    for a in (0, 1):
        for b in (0, 1):
            pxy = np.mean((x == a) & (y == b))
            if pxy > 0:
                mi += pxy * np.log(pxy / (np.mean(x == a) * np.mean(y == b)))
    return float(mi)


def acoustic_label_coupling(data: SynthData, permutations: int = 50, seed: int = 0) -> tuple[float, float]:
    """(mean MI between "state i heard" and "emotion i present", permutation noise floor).

    The noise floor is the 95th percentile of the same statistic with labels
    shuffled across segments.
    """
    heard = np.array([[i in set(decode_states(data, s)) for i in range(N_EMOTIONS)] for s in data.segments],
                     dtype=int)
    labels = np.array([s.emotions for s in data.segments], dtype=int)

    def stat(lab):
        return float(np.mean([_mutual_information(heard[:, i], lab[:, i]) for i in range(N_EMOTIONS)]))

    rng = np.random.default_rng(seed)
    null = [stat(labels[rng.permutation(len(labels))]) for _ in range(permutations)]
    return stat(labels), float(np.percentile(null, 95))
