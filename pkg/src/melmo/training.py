"""Two-stage pretraining: text-only with zeroed acoustics, then multimodal."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, NumericAbort
from .model import BiLMParameters, bilm_forward, bilm_loss, perplexity
from .text import TextCorpus, batch_sentences

logger = logging.getLogger(__name__)

STAGES = ("text-only", "multimodal")
OPTIMIZERS = ("sgd", "adagrad")
DEFAULT_EPOCHS = {"text-only": 10, "multimodal": 5}


@dataclass
class TrainConfig:
    """``lr`` overrides the learning rate; otherwise ``base_lr`` applies to the
    text-only stage and ``base_lr / lr_ratio`` to the multimodal stage."""

    stage: str = "text-only"
    epochs: Optional[int] = None
    base_lr: float = 0.03
    lr_ratio: float = 10.0
    lr: Optional[float] = None
    batch_size: int = 16
    unroll: int = 32
    clip: float = 5.0
    seed: int = 0
    optimizer: str = "adagrad"
    initial_accumulator: float = 1e-6
    freeze_acoustic: bool = False

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise ContractError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ContractError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.epochs is None:
            self.epochs = DEFAULT_EPOCHS[self.stage]
        if self.epochs < 0 or self.batch_size < 1 or self.unroll < 2:
            raise ContractError("epochs >= 0, batch_size >= 1 and unroll >= 2 are required")
        if self.lr_ratio <= 0 or self.base_lr < 0 or (self.lr is not None and self.lr < 0):
            raise ContractError("learning rates must be non-negative and lr_ratio positive")
        if self.clip <= 0:
            raise ContractError("clip norm must be positive")

    @property
    def learning_rate(self) -> float:
        if self.lr is not None:
            return self.lr
        return self.base_lr if self.stage == "text-only" else self.base_lr / self.lr_ratio


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    path: Optional[str] = None

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    @property
    def best_valid_ppl(self) -> float:
        return min(r["valid_ppl"] for r in self.records)

    @classmethod
    def read(cls, path: str | os.PathLike) -> "TrainLog":
        with open(path, encoding="utf-8") as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if not math.isfinite(norm):
        raise NumericAbort("non-finite gradient")
    scale = max_norm / norm if norm > max_norm else 1.0
    return {k: g * scale for k, g in grads.items()}, norm


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float,
             clip_norm: float) -> dict[str, np.ndarray]:
    """Global-norm clipping then a plain gradient step; returns new arrays."""
    clipped, _ = clip_by_global_norm(grads, clip_norm)
    return {k: p - lr * clipped[k] if k in clipped else p for k, p in params.items()}


class Optimizer:
    """SGD or Adagrad over named tensors, updating ``.data`` in place."""

    def __init__(self, kind: str = "adagrad", lr: float = 0.03, clip: float = 5.0, initial_accumulator: float = 1e-6):
        if kind not in OPTIMIZERS:
            raise ContractError(f"unknown optimizer {kind!r}")
        self.kind, self.lr, self.clip = kind, lr, clip
        self.initial_accumulator = initial_accumulator
        self.accum: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, Tensor]) -> float:
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        clipped, norm = clip_by_global_norm(grads, self.clip)
        for name, g in clipped.items():
            p = params[name]
            if self.kind == "sgd":
                p.data -= self.lr * g
            else:
                acc = self.accum.get(name)
                if acc is None:
                    acc = self.accum[name] = np.full_like(p.data, self.initial_accumulator)
                acc += g * g
                p.data -= self.lr * g / np.sqrt(acc)
        return norm


def _trainable(params: BiLMParameters, config: TrainConfig) -> dict[str, Tensor]:
    return {k: p for k, p in params.items() if not (config.freeze_acoustic and k.startswith("acoustic."))}


def train_stage(
    params: BiLMParameters,
    train: TextCorpus,
    valid: TextCorpus,
    config: TrainConfig,
    out_dir: Optional[str] = None,
) -> tuple[BiLMParameters, TrainLog]:
    """Run ``config.epochs`` passes; return the best-on-validation parameters.

    Text-only stage drops any acoustics so every gate sees a zero input.
    With ``out_dir`` the last and best checkpoints plus ``train_log.jsonl``
    are written there after each epoch.
    """
    if config.stage == "text-only":
        train, valid = train.without_acoustics(), valid.without_acoustics()
    params = params.copy()
    params.set_trainable(True)
    trainable = _trainable(params, config)
    opt = Optimizer(config.optimizer, config.learning_rate, config.clip, config.initial_accumulator)
    log = TrainLog()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log.path = os.path.join(out_dir, "train_log.jsonl")
        open(log.path, "w").close()
    best = params.copy()
    best_ppl = math.inf
    max_chars = params.config.max_chars
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        rng = np.random.default_rng([config.seed, epoch])
        total, count = 0.0, 0
        for batch in batch_sentences(train, config.batch_size, config.unroll, max_chars, rng):
            n = batch.n_targets()
            if n == 0:
                continue
            params.zero_grad()
            loss = bilm_loss(bilm_forward(params, batch), batch)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericAbort(f"non-finite loss at epoch {epoch}; last good checkpoint kept")
            loss.backward()
            opt.step(trainable)
            total += value * n
            count += n
        params.zero_grad()
        valid_ppl = perplexity(params, valid, config.batch_size, config.unroll)
        if not math.isfinite(valid_ppl):
            raise NumericAbort(f"non-finite validation perplexity at epoch {epoch}")
        record = {
            "epoch": epoch,
            "stage": config.stage,
            "train_loss": total / max(count, 1),
            "valid_ppl": valid_ppl,
            "wall_clock": time.perf_counter() - started,
            "checkpoint": None,
        }
        if valid_ppl < best_ppl:
            best_ppl = valid_ppl
            best = params.copy()
        if out_dir is not None:
            params.save(os.path.join(out_dir, "last.ckpt"))
            best.save(os.path.join(out_dir, "best.ckpt"))
            record["checkpoint"] = os.path.join(out_dir, "best.ckpt")
        log.append(record)
        logger.info("%s epoch %d: train loss %.4f, valid ppl %.3f", config.stage, epoch,
                    record["train_loss"], valid_ppl)
    if config.epochs == 0:
        best = params
    return best, log


def train_stage1(params: BiLMParameters, train: TextCorpus, valid: TextCorpus, config: TrainConfig,
                 out_dir: Optional[str] = None) -> tuple[BiLMParameters, TrainLog]:
    if config.stage != "text-only":
        raise ContractError("stage 1 needs a text-only config")
    return train_stage(params, train, valid, config, out_dir)


def train_stage2(params: BiLMParameters, train: TextCorpus, valid: TextCorpus, config: TrainConfig,
                 out_dir: Optional[str] = None) -> tuple[BiLMParameters, TrainLog]:
    if config.stage != "multimodal":
        raise ContractError("stage 2 needs a multimodal config")
    if train.acoustic is None:
        raise ContractError("stage 2 needs a corpus with acoustic matrices")
    return train_stage(params, train, valid, config, out_dir)


def config_dict(config: TrainConfig) -> dict:
    out = asdict(config)
    out["learning_rate"] = config.learning_rate
    return out
