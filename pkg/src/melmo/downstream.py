"""Multi-label emotion classifier over sentence embeddings, and its metrics.

The classifier reads cached per-layer sentence averages, mixes them with a
trainable :class:`~melmo.embeddings.ScalarMix`, and feeds the result to a
two-hidden-layer ReLU network with six independent sigmoid outputs.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .autodiff import Tensor, no_grad, ops
from .embeddings import ScalarMix, mix_means
from .errors import ContractError, DimensionError, UndefinedMetricError
from .segments import Segment
from .training import Optimizer

logger = logging.getLogger(__name__)

EMOTIONS = ("anger", "disgust", "fear", "happy", "sad", "surprise")
RATING_THRESHOLD = 1.0


def binarize(ratings) -> np.ndarray:
    """An emotion is present when its rating is strictly above one."""
    return np.asarray(ratings, dtype=np.float64) > RATING_THRESHOLD


@dataclass
class EmotionLabels:
    ratings: np.ndarray

    def __post_init__(self) -> None:
        self.ratings = np.asarray(self.ratings, dtype=np.float64)
        if self.ratings.shape[-1] != len(EMOTIONS):
            raise DimensionError(f"expected {len(EMOTIONS)} ratings, got shape {self.ratings.shape}")
        if np.any(self.ratings < 0) or np.any(self.ratings > 3):
            raise ContractError("ratings must lie in [0, 3]")

    @property
    def binary(self) -> np.ndarray:
        return binarize(self.ratings)


# -- metrics ---------------------------------------------------------------

def _confusion(predictions, truths) -> tuple[int, int, int, int]:
    p = np.asarray(predictions, dtype=bool)
    t = np.asarray(truths, dtype=bool)
    if p.shape != t.shape or p.ndim != 1:
        raise DimensionError(f"predictions {p.shape} and truths {t.shape} must be equal-length vectors")
    tp = int(np.sum(p & t))
    fn = int(np.sum(~p & t))
    tn = int(np.sum(~p & ~t))
    fp = int(np.sum(p & ~t))
    return tp, fn, tn, fp


def weighted_accuracy(predictions, truths) -> float:
    """Mean of the recalls on positives and on negatives (macro recall)."""
    tp, fn, tn, fp = _confusion(predictions, truths)
    if tp + fn == 0 or tn + fp == 0:
        raise UndefinedMetricError("weighted accuracy needs both classes in the truth vector")
    return (tp / (tp + fn) + tn / (tn + fp)) / 2


def f1_score(predictions, truths) -> float:
    """Positive-class F1; 0 when precision and recall are both 0."""
    tp, fn, _, fp = _confusion(predictions, truths)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def per_emotion_scores(predictions: np.ndarray, truths: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """WA and F1 for each of the six columns."""
    wa = np.array([weighted_accuracy(predictions[:, i], truths[:, i]) for i in range(truths.shape[1])])
    f1 = np.array([f1_score(predictions[:, i], truths[:, i]) for i in range(truths.shape[1])])
    return wa, f1


# -- data ------------------------------------------------------------------

@dataclass
class EmbeddingSet:
    """Cached layer averages ``[N, L, 2h]`` with binary labels ``[N, 6]``."""

    ids: list[str]
    means: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.means = np.asarray(self.means, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=bool)
        if self.means.ndim != 3:
            raise DimensionError(f"embedding set needs [N, L, 2h] means, got {self.means.shape}")
        if not len(self.ids) == self.means.shape[0] == self.labels.shape[0]:
            raise DimensionError("ids, means and labels disagree on N")
        if self.labels.shape[1:] != (len(EMOTIONS),):
            raise DimensionError(f"labels must be [N, {len(EMOTIONS)}], got {self.labels.shape}")


def embedding_set(cache: Mapping[str, np.ndarray], segments: Sequence[Segment], split: str) -> EmbeddingSet:
    chosen = [s for s in segments if s.split == split]
    if not chosen:
        raise ContractError(f"no segments in split {split!r}")
    missing = [s.id for s in chosen if s.id not in cache]
    if missing:
        raise ContractError(f"{len(missing)} segments lack cached embeddings, e.g. {missing[0]!r}")
    unlabelled = [s.id for s in chosen if s.ratings is None]
    if unlabelled:
        raise ContractError(f"segment {unlabelled[0]!r} has no ratings")
    return EmbeddingSet([s.id for s in chosen], np.stack([cache[s.id] for s in chosen]),
                        np.stack([binarize(s.ratings) for s in chosen]))


def check_disjoint(*sets: EmbeddingSet) -> None:
    seen: dict[str, int] = {}
    for i, s in enumerate(sets):
        for seg_id in s.ids:
            if seen.setdefault(seg_id, i) != i:
                raise ContractError(f"segment {seg_id!r} appears in more than one split")


# -- classifier ------------------------------------------------------------

@dataclass(frozen=True)
class ClassifierConfig:
    hidden: tuple[int, int] = (256, 128)
    epochs: int = 30
    lr: float = 0.01
    batch_size: int = 32
    clip: float = 5.0
    seed: int = 0
    threshold: float = 0.5
    tune_thresholds: bool = False

    def __post_init__(self) -> None:
        if len(self.hidden) != 2 or min(self.hidden) < 1:
            raise ContractError("the classifier has exactly two positive-width hidden layers")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ContractError("epochs, batch_size and lr must be positive")
        if not 0.0 < self.threshold < 1.0:
            raise ContractError("threshold must lie in (0, 1)")


class EmotionClassifier:
    def __init__(self, num_layers: int, input_dim: int, config: ClassifierConfig):
        rng = np.random.default_rng(config.seed)
        self.config = config
        self.mix = ScalarMix(num_layers)
        dims = (input_dim, *config.hidden, len(EMOTIONS))
        self.layers: list[tuple[Tensor, Tensor]] = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out))
            self.layers.append((Tensor(w, requires_grad=True, name=f"clf{i}.weight"),
                                Tensor(np.zeros(fan_out), requires_grad=True, name=f"clf{i}.bias")))
        self.thresholds = np.full(len(EMOTIONS), config.threshold)

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.mix.parameters())
        for w, b in self.layers:
            out[w.name] = w
            out[b.name] = b
        return out

    def logits(self, means) -> Tensor:
        x = mix_means(means, self.mix)
        for i, (w, b) in enumerate(self.layers):
            x = ops.add(ops.matmul(x, w), b)
            if i < len(self.layers) - 1:
                x = ops.relu(x)
        return x

    def loss(self, means, labels) -> Tensor:
        return ops.bce_with_logits(self.logits(means), np.asarray(labels, dtype=np.float64))

    def probabilities(self, means) -> np.ndarray:
        with no_grad():
            return ops.sigmoid(self.logits(means)).data

    def predict(self, means) -> np.ndarray:
        return self.probabilities(means) > self.thresholds

    def state(self) -> dict[str, np.ndarray]:
        out = {k: p.data.copy() for k, p in self.parameters().items()}
        out["thresholds"] = self.thresholds.copy()
        return out

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        for k, p in self.parameters().items():
            p.data = state[k].copy()
        self.thresholds = state["thresholds"].copy()


def tune_thresholds(probs: np.ndarray, truths: np.ndarray) -> np.ndarray:
    """Per emotion, the probability cut that maximises validation WA."""
    out = np.empty(probs.shape[1])
    for i in range(probs.shape[1]):
        candidates = np.unique(np.concatenate([[0.5], probs[:, i]]))
        scores = [weighted_accuracy(probs[:, i] > c, truths[:, i])
                  if 0 < np.sum(probs[:, i] > c) < len(probs) else 0.5 for c in candidates]
        out[i] = candidates[int(np.argmax(scores))]
    return out


@dataclass
class TrainedClassifier:
    """Snapshots selected separately on validation WA and validation F1."""

    by_wa: EmotionClassifier
    by_f1: EmotionClassifier
    valid_wa: float
    valid_f1: float
    history: list[dict] = field(default_factory=list)


def train_classifier(train: EmbeddingSet, valid: EmbeddingSet, config: ClassifierConfig) -> TrainedClassifier:
    """Mini-batch Adagrad on mean BCE over the classifier and the scalar mix."""
    check_disjoint(train, valid)
    if train.means.shape[1:] != valid.means.shape[1:]:
        raise DimensionError(f"train means {train.means.shape[1:]} and valid means {valid.means.shape[1:]} differ")
    clf = EmotionClassifier(train.means.shape[1], train.means.shape[2], config)
    params = clf.parameters()
    opt = Optimizer("adagrad", config.lr, config.clip)
    rng = np.random.default_rng([config.seed, 1])
    best_wa = best_f1 = -np.inf
    wa_state = f1_state = clf.state()
    history = []
    n = len(train.ids)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            for p in params.values():
                p.zero_grad()
            loss = clf.loss(train.means[idx], train.labels[idx])
            loss.backward()
            opt.step(params)
            total += loss.item() * len(idx)
        if config.tune_thresholds:
            clf.thresholds = tune_thresholds(clf.probabilities(valid.means), valid.labels)
        wa, f1 = per_emotion_scores(clf.predict(valid.means), valid.labels)
        record = {"epoch": epoch, "train_loss": total / n, "valid_wa": float(wa.mean()), "valid_f1": float(f1.mean())}
        history.append(record)
        if record["valid_wa"] > best_wa:
            best_wa, wa_state = record["valid_wa"], clf.state()
        if record["valid_f1"] > best_f1:
            best_f1, f1_state = record["valid_f1"], clf.state()
    by_wa = EmotionClassifier(train.means.shape[1], train.means.shape[2], config)
    by_wa.load_state(wa_state)
    by_f1 = EmotionClassifier(train.means.shape[1], train.means.shape[2], config)
    by_f1.load_state(f1_state)
    return TrainedClassifier(by_wa, by_f1, best_wa, best_f1, history)


# -- protocol --------------------------------------------------------------

@dataclass
class EvalReport:
    """Test-split WA and F1 per run and emotion, shape [runs, 6] each."""

    name: str
    wa_runs: np.ndarray
    f1_runs: np.ndarray
    seeds: list[int]
    config: dict = field(default_factory=dict)
    emotions: tuple[str, ...] = EMOTIONS

    def __post_init__(self) -> None:
        self.wa_runs = np.asarray(self.wa_runs, dtype=np.float64)
        self.f1_runs = np.asarray(self.f1_runs, dtype=np.float64)
        expected = (len(self.seeds), len(self.emotions))
        if self.wa_runs.shape != expected or self.f1_runs.shape != expected:
            raise DimensionError(f"per-run scores must be {expected}")

    @property
    def wa(self) -> np.ndarray:
        return self.wa_runs.mean(axis=0)

    @property
    def f1(self) -> np.ndarray:
        return self.f1_runs.mean(axis=0)

    @property
    def average_wa(self) -> float:
        return float(self.wa.mean())

    @property
    def average_f1(self) -> float:
        return float(self.f1.mean())

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "emotions": list(self.emotions),
            "seeds": list(self.seeds),
            "config": self.config,
            "runs": [{"seed": s, "wa": self.wa_runs[i].tolist(), "f1": self.f1_runs[i].tolist()}
                     for i, s in enumerate(self.seeds)],
            "wa": self.wa.tolist(),
            "f1": self.f1.tolist(),
            "average_wa": self.average_wa,
            "average_f1": self.average_f1,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        return cls(d["name"], [r["wa"] for r in d["runs"]], [r["f1"] for r in d["runs"]],
                   [r["seed"] for r in d["runs"]], dict(d.get("config", {})), tuple(d["emotions"]))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "EvalReport":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def format_table(reports: Sequence[EvalReport]) -> str:
    """Rows per model, WA/F1 column pairs per emotion then the average, in percent."""
    names = [*EMOTIONS, "average"]
    width = max([5, *(len(r.name) for r in reports)])
    head1 = " " * width + "".join(f" | {n.capitalize():^11}" for n in names)
    head2 = " " * width + " |    WA    F1" * len(names)
    lines = [head1, head2, "-" * len(head2)]
    for r in reports:
        cells = [f"{100 * a:5.1f} {100 * b:5.1f}" for a, b in zip(r.wa, r.f1)]
        cells.append(f"{100 * r.average_wa:5.1f} {100 * r.average_f1:5.1f}")
        lines.append(f"{r.name:<{width}}" + "".join(f" | {c}" for c in cells))
    return "\n".join(lines)


def evaluate_protocol(
    train: EmbeddingSet,
    valid: EmbeddingSet,
    test: EmbeddingSet,
    configs: ClassifierConfig | Sequence[ClassifierConfig] = ClassifierConfig(),
    n_runs: int = 10,
    base_seed: int = 0,
    name: str = "model",
) -> EvalReport:
    """Train ``n_runs`` seeds per candidate config and report test scores.

    The config with the best mean validation WA supplies the WA figures and
    the one with the best mean validation F1 supplies the F1 figures. The
    test split is only scored after selection.
    """
    if n_runs < 1:
        raise ContractError("n_runs must be at least 1")
    check_disjoint(train, valid, test)
    if isinstance(configs, ClassifierConfig):
        configs = [configs]
    seeds = [base_seed + r for r in range(n_runs)]
    candidates = []
    for cfg in configs:
        runs = []
        for seed in seeds:
            run_cfg = ClassifierConfig(**{**asdict(cfg), "seed": seed})
            runs.append(train_classifier(train, valid, run_cfg))
        candidates.append((cfg, runs))
        logger.info("classifier %s: mean valid WA %.4f", cfg, np.mean([r.valid_wa for r in runs]))
    wa_cfg, wa_runs = max(candidates, key=lambda c: np.mean([r.valid_wa for r in c[1]]))
    f1_cfg, f1_runs = max(candidates, key=lambda c: np.mean([r.valid_f1 for r in c[1]]))
    wa = [per_emotion_scores(r.by_wa.predict(test.means), test.labels)[0] for r in wa_runs]
    f1 = [per_emotion_scores(r.by_f1.predict(test.means), test.labels)[1] for r in f1_runs]
    return EvalReport(name, wa, f1, seeds, {"wa_selected": _cfg_dict(wa_cfg), "f1_selected": _cfg_dict(f1_cfg)})


def _cfg_dict(cfg: ClassifierConfig) -> dict:
    out = asdict(cfg)
    out["hidden"] = list(cfg.hidden)
    out.pop("seed")
    return out


def majority_predictions(train_labels: np.ndarray, n: int) -> np.ndarray:
    """Predict each emotion's majority training class for every example."""
    majority = np.asarray(train_labels, dtype=bool).mean(axis=0) > 0.5
    return np.tile(majority, (n, 1))


def evaluate_fixed(predictions: np.ndarray, test: EmbeddingSet, name: str = "baseline",
                   seed: Optional[int] = 0) -> EvalReport:
    wa, f1 = per_emotion_scores(predictions, test.labels)
    return EvalReport(name, [wa], [f1], [seed])
