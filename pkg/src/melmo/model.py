"""Multimodal bidirectional language model.

Token embeddings come from a character CNN, acoustic embeddings from a CNN
over word-aligned frames. The acoustic embedding gates the token embedding
elementwise through a sigmoid; the gated vectors feed a forward and a
backward two-layer LSTM, and one softmax layer scores both directions.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, fields
from typing import Iterable

import numpy as np

from .autodiff import Tensor, load_arrays, no_grad, ops, save_arrays
from .errors import ContractError, DimensionError, IngestionError
from .text import ALPHABET_SIZE, DEFAULT_MAX_CHARS, Batch, TextCorpus, batch_sentences

Widths = tuple[tuple[int, int], ...]


def _format_widths(widths: Widths) -> str:
    return ",".join(f"{w}x{n}" for w, n in widths)


def _parse_widths(text: str) -> Widths:
    try:
        return tuple((int(w), int(n)) for w, n in (item.split("x") for item in text.split(",")))
    except ValueError as exc:
        raise IngestionError(f"bad layer spec {text!r}; expected e.g. 1x8,2x16") from exc


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    char_dim: int = 16
    char_filters: Widths = ((1, 8), (2, 16), (3, 32), (4, 32))
    max_chars: int = DEFAULT_MAX_CHARS
    embed_dim: int = 64
    hidden_dim: int = 128
    num_layers: int = 2
    acoustic_dim: int = 74
    max_frames: int = 40
    acoustic_layers: Widths = ((3, 64), (3, 64))
    acoustic_pool: int = 2
    forget_bias: float = 1.0

    def __post_init__(self) -> None:
        if self.vocab_size < 4:
            raise ContractError("vocabulary must hold the reserved tokens plus at least one word")
        if any(w > self.max_chars for w, _ in self.char_filters):
            raise ContractError("a character filter is wider than max_chars")
        steps = self.max_frames
        for i, (w, _) in enumerate(self.acoustic_layers):
            steps = steps - w + 1
            if steps < 1:
                raise ContractError(f"acoustic layer {i} (width {w}) leaves no frames")
            if i < len(self.acoustic_layers) - 1:
                steps //= self.acoustic_pool
                if steps < 1:
                    raise ContractError(f"pooling after acoustic layer {i} leaves no frames")

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for key, value in asdict(self).items():
                if key in ("char_filters", "acoustic_layers"):
                    value = _format_widths(value)
                fh.write(f"{key} = {value}\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ModelConfig":
        return cls.from_mapping(read_key_values(path))

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "ModelConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in kinds:
                raise IngestionError(f"unknown model config key {key!r}")
            if key in ("char_filters", "acoustic_layers"):
                kwargs[key] = _parse_widths(raw)
            elif key == "forget_bias":
                kwargs[key] = float(raw)
            else:
                kwargs[key] = int(raw)
        return cls(**kwargs)


def read_key_values(path: str | os.PathLike) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise IngestionError(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            out[key] = value
    return out


class BiLMParameters:
    """Named parameter tensors of one model; the softmax exists exactly once."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, random_biases: bool = False) -> "BiLMParameters":
        """Scaled-normal weights; biases zero except the LSTM forget gates.

        ``random_biases`` draws every bias at random instead, which keeps
        gradient checks away from ReLU kinks at zero.
        """
        rng = np.random.default_rng(seed)
        t: dict[str, Tensor] = {}

        def weight(name, shape, fan_in, scale=1.0):
            t[name] = Tensor(rng.normal(scale=scale / math.sqrt(fan_in), size=shape), requires_grad=True, name=name)

        def bias(name, size, value=0.0):
            data = rng.normal(scale=0.5, size=size) if random_biases else np.full(size, value)
            t[name] = Tensor(data, requires_grad=True, name=name)

        c, e, h = config.char_dim, config.embed_dim, config.hidden_dim
        t["char.embedding"] = Tensor(rng.normal(scale=1.0, size=(ALPHABET_SIZE, c)), requires_grad=True,
                                     name="char.embedding")
        for i, (w, n) in enumerate(config.char_filters):
            weight(f"char.conv{i}.weight", (w, c, n), w * c)
            bias(f"char.conv{i}.bias", n)
        total = sum(n for _, n in config.char_filters)
        weight("char.proj.weight", (total, e), total)
        bias("char.proj.bias", e)

        in_ch = config.acoustic_dim
        for i, (w, n) in enumerate(config.acoustic_layers):
            weight(f"acoustic.conv{i}.weight", (w, in_ch, n), w * in_ch)
            bias(f"acoustic.conv{i}.bias", n)
            in_ch = n
        # zero acoustics give all-zero CNN features, so the gate is sigmoid(bias)
        weight("acoustic.proj.weight", (in_ch, e), in_ch)
        bias("acoustic.proj.bias", e)

        for direction in ("fwd", "bwd"):
            in_dim = e
            for j in range(config.num_layers):
                prefix = f"lstm.{direction}.{j}"
                weight(f"{prefix}.wx", (in_dim, 4 * h), in_dim)
                weight(f"{prefix}.wh", (h, 4 * h), h)
                gate_bias = np.zeros(4 * h)
                gate_bias[h:2 * h] = config.forget_bias
                if random_biases:
                    gate_bias = rng.normal(scale=0.5, size=4 * h)
                t[f"{prefix}.b"] = Tensor(gate_bias, requires_grad=True, name=f"{prefix}.b")
                in_dim = h

        weight("softmax.weight", (config.vocab_size, h), h)
        bias("softmax.bias", config.vocab_size)
        return cls(config, t)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def zero_grad(self) -> None:
        for p in self.tensors.values():
            p.grad = None

    def set_trainable(self, flag: bool) -> None:
        for p in self.tensors.values():
            p.requires_grad = flag

    def copy(self) -> "BiLMParameters":
        return BiLMParameters(self.config, {k: Tensor(v.data, requires_grad=v.requires_grad, name=k)
                                            for k, v in self.tensors.items()})

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def save(self, path: str | os.PathLike) -> None:
        save_arrays(path, self.to_arrays())

    @classmethod
    def load(cls, path: str | os.PathLike, config: ModelConfig) -> "BiLMParameters":
        arrays = load_arrays(path)
        expected = cls.init(config, seed=0)
        if list(arrays) != list(expected.tensors):
            raise IngestionError(f"{path}: parameter names do not match the model config")
        for name, arr in arrays.items():
            if arr.shape != expected[name].shape:
                raise IngestionError(f"{path}: {name} has shape {arr.shape}, config wants {expected[name].shape}")
        return cls(config, {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()})

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.tensors.values()))


# --- embedders ---------------------------------------------------------------


def _char_cnn(params: BiLMParameters, char_ids: np.ndarray) -> Tensor:
    cfg = params.config
    n, width = char_ids.shape
    x = ops.reshape(ops.take(params["char.embedding"], char_ids.reshape(-1)), (n, width, cfg.char_dim))
    pooled = []
    for i in range(len(cfg.char_filters)):
        conv = ops.conv1d(x, params[f"char.conv{i}.weight"], params[f"char.conv{i}.bias"])
        pooled.append(ops.max_over_time(ops.relu(conv)))
    features = ops.concat(pooled, axis=1) if len(pooled) > 1 else pooled[0]
    return ops.add(ops.matmul(features, params["char.proj.weight"]), params["char.proj.bias"])


def embed_tokens(params: BiLMParameters, char_ids: np.ndarray) -> Tensor:
    """Token embeddings ``[n, e]`` for character-map rows ``[n, l_c]``.

    Each distinct spelling is embedded once and gathered back, so repeated
    tokens share both the value and the gradient path.
    """
    char_ids = np.asarray(char_ids, dtype=np.int64)
    if char_ids.ndim != 2 or char_ids.shape[1] != params.config.max_chars:
        raise DimensionError(f"char ids must be [n, {params.config.max_chars}], got {char_ids.shape}")
    uniq, inverse = np.unique(char_ids, axis=0, return_inverse=True)
    return ops.take(_char_cnn(params, uniq), inverse.reshape(-1))


def embed_token(params: BiLMParameters, char_row: np.ndarray) -> Tensor:
    return ops.reshape(embed_tokens(params, np.asarray(char_row)[None, :]), (params.config.embed_dim,))


def _acoustic_cnn(params: BiLMParameters, frames: np.ndarray) -> Tensor:
    cfg = params.config
    x = Tensor(np.ascontiguousarray(frames.transpose(0, 2, 1)))  # [n, l_a, d]: time on axis 1
    last = len(cfg.acoustic_layers) - 1
    for i in range(len(cfg.acoustic_layers)):
        x = ops.relu(ops.conv1d(x, params[f"acoustic.conv{i}.weight"], params[f"acoustic.conv{i}.bias"]))
        x = ops.max_over_time(x) if i == last else ops.max_pool1d(x, cfg.acoustic_pool)
    return ops.add(ops.matmul(x, params["acoustic.proj.weight"]), params["acoustic.proj.bias"])


def embed_acoustic(params: BiLMParameters, matrices: np.ndarray) -> Tensor:
    """Gate pre-activations ``[n, e]`` for acoustic matrices ``[n, d, l_a]``."""
    cfg = params.config
    matrices = np.asarray(matrices, dtype=np.float64)
    single = matrices.ndim == 2
    if single:
        matrices = matrices[None]
    if matrices.ndim != 3 or matrices.shape[1:] != (cfg.acoustic_dim, cfg.max_frames):
        raise DimensionError(f"acoustic input must be [n, {cfg.acoustic_dim}, {cfg.max_frames}], "
                             f"got {matrices.shape}")
    n = matrices.shape[0]
    flat = matrices.reshape(n, -1)
    uniq, inverse = np.unique(flat, axis=0, return_inverse=True)
    out = ops.take(_acoustic_cnn(params, uniq.reshape(-1, cfg.acoustic_dim, cfg.max_frames)), inverse.reshape(-1))
    return ops.reshape(out, (cfg.embed_dim,)) if single else out


def fuse(token_emb, gate_pre) -> Tensor:
    """Scale token embeddings by the sigmoid of the acoustic pre-activation."""
    token_emb, gate_pre = ops.as_tensor(token_emb), ops.as_tensor(gate_pre)
    if token_emb.shape != gate_pre.shape:
        raise DimensionError(f"fuse needs equal shapes, got {token_emb.shape} and {gate_pre.shape}")
    return ops.mul(token_emb, ops.sigmoid(gate_pre))


# --- recurrent stacks --------------------------------------------------------


def _cell(gx_t: Tensor, h: Tensor, c: Tensor, wh: Tensor) -> tuple[Tensor, Tensor]:
    size = h.shape[-1]
    gates = ops.add(gx_t, ops.matmul(h, wh))
    sig = ops.sigmoid(gates[:, :3 * size])
    cand = ops.tanh(gates[:, 3 * size:])
    i_gate, f_gate, o_gate = sig[:, :size], sig[:, size:2 * size], sig[:, 2 * size:]
    c_new = ops.add(ops.mul(f_gate, c), ops.mul(i_gate, cand))
    h_new = ops.mul(o_gate, ops.tanh(c_new))
    return h_new, c_new


def lstm_step(x, state: tuple, wx: Tensor, wh: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM cell update with gate blocks ordered (input, forget, output, candidate).

    ``x`` is [e] or [batch, e]; ``state`` is ``(h, c)`` of matching rank.
    """
    x, h, c = (ops.as_tensor(v) for v in (x, *state))
    single = x.ndim == 1
    if single:
        x, h, c = (ops.reshape(v, (1, v.shape[0])) for v in (x, h, c))
    size = wh.shape[0]
    if x.shape[1] != wx.shape[0] or h.shape[1] != size or c.shape[1] != size:
        raise DimensionError(f"lstm_step: x {x.shape}, h {h.shape}, c {c.shape} vs wx {wx.shape}, wh {wh.shape}")
    gx = ops.add(ops.matmul(x, wx), b)
    h_new, c_new = _cell(gx, h, c, wh)
    if single:
        return ops.reshape(h_new, (size,)), ops.reshape(c_new, (size,))
    return h_new, c_new


def run_stack(params: BiLMParameters, direction: str, inputs: Tensor) -> list[Tensor]:
    """Run one direction's LSTM layers left-to-right over ``[B, U, e]``; per-layer outputs."""
    cfg = params.config
    batch, steps, _ = inputs.shape
    h_dim = cfg.hidden_dim
    x = inputs
    outputs = []
    for j in range(cfg.num_layers):
        prefix = f"lstm.{direction}.{j}"
        wx, wh, b = params[f"{prefix}.wx"], params[f"{prefix}.wh"], params[f"{prefix}.b"]
        flat = ops.reshape(x, (batch * steps, x.shape[2]))
        gx = ops.reshape(ops.add(ops.matmul(flat, wx), b), (batch, steps, 4 * h_dim))
        h = Tensor(np.zeros((batch, h_dim)))
        c = Tensor(np.zeros((batch, h_dim)))
        hs = []
        for t in range(steps):
            h, c = _cell(gx[:, t, :], h, c, wh)
            hs.append(h)
        x = ops.stack(hs, axis=1)
        outputs.append(x)
    return outputs


def reversal_index(lengths: np.ndarray, steps: int) -> np.ndarray:
    """Flat gather index reversing each row's first ``length`` positions (an involution)."""
    idx = np.arange(len(lengths) * steps).reshape(len(lengths), steps)
    for r, n in enumerate(lengths):
        idx[r, :n] = idx[r, :n][::-1]
    return idx.reshape(-1)


@dataclass
class BiLMOutput:
    logits: Tensor  # [2 * B * U, V]: forward rows, then backward rows
    layers: list[tuple[Tensor, Tensor]]  # per layer: (forward [B, U, h], backward [B, U, h])
    steps: int

    @property
    def batch_size(self) -> int:
        return self.layers[0][0].shape[0]

    def fwd_logits(self) -> np.ndarray:
        b, u = self.batch_size, self.steps
        return self.logits.data[:b * u].reshape(b, u, -1)

    def bwd_logits(self) -> np.ndarray:
        b, u = self.batch_size, self.steps
        return self.logits.data[b * u:].reshape(b, u, -1)


def _fused_inputs(params: BiLMParameters, batch: Batch, steps: int) -> Tensor:
    cfg = params.config
    b = batch.tokens.shape[0]
    chars = batch.chars[:, :steps].reshape(b * steps, -1)
    if batch.acoustic is None:
        acoustic = np.zeros((b * steps, cfg.acoustic_dim, cfg.max_frames))
    else:
        acoustic = batch.acoustic[:, :steps].reshape(b * steps, cfg.acoustic_dim, cfg.max_frames)
    fused = fuse(embed_tokens(params, chars), embed_acoustic(params, acoustic))
    return fused


def bilm_forward(params: BiLMParameters, batch: Batch) -> BiLMOutput:
    """Both LMs over one batch, sharing the gated inputs and the softmax.

    Positions past the longest row are dropped; the backward stack reads
    each row reversed within its own length so padding never leaks in.
    """
    cfg = params.config
    b = batch.tokens.shape[0]
    steps = max(int(batch.lengths.max()), 1)
    fused = _fused_inputs(params, batch, steps)  # [b * steps, e]
    fwd_layers = run_stack(params, "fwd", ops.reshape(fused, (b, steps, cfg.embed_dim)))
    rev = reversal_index(batch.lengths, steps)
    bwd_in = ops.reshape(ops.take(fused, rev), (b, steps, cfg.embed_dim))
    bwd_layers = [
        ops.reshape(ops.take(ops.reshape(out, (b * steps, cfg.hidden_dim)), rev), (b, steps, cfg.hidden_dim))
        for out in run_stack(params, "bwd", bwd_in)
    ]
    top = ops.concat([ops.reshape(fwd_layers[-1], (b * steps, cfg.hidden_dim)),
                      ops.reshape(bwd_layers[-1], (b * steps, cfg.hidden_dim))], axis=0)
    logits = ops.add(ops.matmul(top, ops.transpose(params["softmax.weight"])), params["softmax.bias"])
    return BiLMOutput(logits, list(zip(fwd_layers, bwd_layers)), steps)


def _targets_and_weights(out: BiLMOutput, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    u = out.steps
    targets = np.concatenate([batch.fwd_targets[:, :u].reshape(-1), batch.bwd_targets[:, :u].reshape(-1)])
    weights = (targets >= 0).astype(np.float64)
    return targets, weights


def bilm_loss(out: BiLMOutput, batch: Batch) -> Tensor:
    """Mean over scored positions of (forward NLL + backward NLL) / 2."""
    targets, weights = _targets_and_weights(out, batch)
    if weights.sum() == 0:
        raise ContractError("batch has no scored positions")
    return ops.softmax_cross_entropy(out.logits, targets, weights=weights)


def nll_sums(out: BiLMOutput, batch: Batch) -> tuple[float, float, int]:
    """(forward NLL sum, backward NLL sum, scored positions per direction)."""
    targets, weights = _targets_and_weights(out, batch)
    z = out.logits.data
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    safe = np.where(weights > 0, targets, 0)
    nll = (lse - z[np.arange(len(safe)), safe]) * weights
    half = len(nll) // 2
    return float(nll[:half].sum()), float(nll[half:].sum()), int(weights[:half].sum())


def perplexity(params: BiLMParameters, corpus: TextCorpus | Iterable[Batch], batch_size: int = 32,
               unroll: int = 64) -> float:
    """Mean of forward and backward perplexities, exp(mean NLL per scored token)."""
    batches = corpus
    if isinstance(corpus, TextCorpus):
        batches = batch_sentences(corpus, batch_size, unroll, params.config.max_chars)
    fwd = bwd = 0.0
    count = 0
    with no_grad():
        for batch in batches:
            if batch.n_targets() == 0:
                continue
            f, b, n = nll_sums(bilm_forward(params, batch), batch)
            fwd, bwd, count = fwd + f, bwd + b, count + n
    if count == 0:
        raise ContractError("corpus has no scored positions")
    return 0.5 * (math.exp(fwd / count) + math.exp(bwd / count))


def gate_values(params: BiLMParameters, batch: Batch) -> np.ndarray:
    """Sigmoid gate activations ``[n_real, e]`` at real word positions (no <bos>/<eos>)."""
    cfg = params.config
    b, u = batch.tokens.shape
    keep = np.zeros((b, u), dtype=bool)
    for r, n in enumerate(batch.lengths):
        keep[r, 1:max(n - 1, 1)] = True
    keep = keep.reshape(-1)
    acoustic = np.zeros((b * u, cfg.acoustic_dim, cfg.max_frames)) if batch.acoustic is None else \
        batch.acoustic.reshape(b * u, cfg.acoustic_dim, cfg.max_frames)
    with no_grad():
        pre = embed_acoustic(params, acoustic[keep])
    return ops.sigmoid(pre).data
