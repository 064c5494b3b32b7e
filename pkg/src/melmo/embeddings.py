"""Sentence embeddings from a frozen biLM via a learned scalar mix.

For a segment of N words the LSTM outputs of layer j at word k,
``h[k, j]`` (forward and backward concatenated), are averaged over words
and mixed across layers::

    embedding = gamma * sum_j softmax(w)_j * mean_k h[k, j]

Only the per-layer word averages are cached; ``w`` and ``gamma`` stay
trainable in the downstream model.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Tensor, no_grad, ops
from .errors import ContractError, DimensionError, IngestionError
from .model import BiLMParameters, bilm_forward
from .segments import Segment
from .text import TextCorpus, Vocabulary, batch_sentences

CACHE_MAGIC = b"MELMOEMB"
CACHE_VERSION = 1


@dataclass
class LayerOutputs:
    """``h[k, j]`` for the N real words of one segment: shape [N, L, 2h]."""

    h: np.ndarray
    segment_id: str = ""

    def __post_init__(self) -> None:
        if self.h.ndim != 3 or self.h.shape[0] < 1:
            raise ContractError(f"layer outputs need shape [N >= 1, L, 2h], got {self.h.shape}")

    def layer_means(self) -> np.ndarray:
        return self.h.mean(axis=0)


class ScalarMix:
    def __init__(self, num_layers: int = 2, weights=None, gamma: float = 1.0):
        w = np.zeros(num_layers) if weights is None else np.asarray(weights, dtype=np.float64)
        if w.shape != (num_layers,):
            raise DimensionError(f"expected {num_layers} mixing weights, got shape {w.shape}")
        self.w = Tensor(w, requires_grad=True, name="mix.w")
        self.gamma = Tensor([gamma], requires_grad=True, name="mix.gamma")

    def coefficients(self) -> Tensor:
        return ops.softmax(self.w)

    def parameters(self) -> dict[str, Tensor]:
        return {"mix.w": self.w, "mix.gamma": self.gamma}


def mix_means(means, mix: ScalarMix) -> Tensor:
    """Mix per-layer word averages: [L, D] -> [D] or [B, L, D] -> [B, D]."""
    means = np.asarray(means, dtype=np.float64)
    n_layers = mix.w.shape[0]
    if means.shape[-2] != n_layers:
        raise DimensionError(f"{means.shape[-2]} layers to mix, mixer has {n_layers}")
    c = mix.coefficients()
    total = None
    for j in range(n_layers):
        term = ops.mul(Tensor(means[..., j, :]), c[j:j + 1])
        total = term if total is None else ops.add(total, term)
    return ops.mul(total, mix.gamma)


def mix(outputs: LayerOutputs, scalar_mix: ScalarMix) -> Tensor:
    """The sentence embedding of one segment."""
    return mix_means(outputs.layer_means(), scalar_mix)


def _segments_corpus(segments: Sequence[Segment], vocab: Vocabulary, use_acoustics: bool) -> TextCorpus:
    acoustic = None
    if use_acoustics:
        acoustic = []
        for s in segments:
            pad = np.zeros((1, *s.acoustic.shape[1:]))
            acoustic.append(np.concatenate([pad, s.acoustic, pad], axis=0))
    return TextCorpus.from_token_lists([s.tokens for s in segments], vocab, "test", acoustic=acoustic,
                                       ids=[s.id for s in segments])


def extract_layers_batch(params: BiLMParameters, segments: Sequence[Segment], vocab: Vocabulary,
                         use_acoustics: bool = True, batch_size: int = 32) -> list[LayerOutputs]:
    """One no-grad forward pass per batch; <bos>/<eos> positions are dropped."""
    if any(len(s.tokens) == 0 for s in segments):
        raise ContractError("cannot embed an empty segment")
    if not segments:
        return []
    corpus = _segments_corpus(segments, vocab, use_acoustics)
    unroll = max(len(s) for s in corpus.sentences)
    results: list[LayerOutputs] = [None] * len(segments)  # type: ignore[list-item]
    with no_grad():
        for batch in batch_sentences(corpus, batch_size, unroll, params.config.max_chars):
            out = bilm_forward(params, batch)
            layers = np.stack([np.concatenate([f.data, b.data], axis=2) for f, b in out.layers], axis=2)
            for r, i in enumerate(batch.rows):
                n = int(batch.lengths[r])
                results[i] = LayerOutputs(layers[r, 1:n - 1].copy(), segments[i].id)
    return results


def extract_layers(params: BiLMParameters, segment: Segment, vocab: Vocabulary,
                   use_acoustics: bool = True) -> LayerOutputs:
    return extract_layers_batch(params, [segment], vocab, use_acoustics)[0]


def write_cache(path: str | os.PathLike, means: Mapping[str, np.ndarray]) -> None:
    """Per-segment layer averages ``[L, 2h]`` keyed by segment id."""
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<II", CACHE_VERSION, len(means)))
        for seg_id, arr in means.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.ndim != 2:
                raise DimensionError(f"cache entry {seg_id!r} must be [L, 2h], got {arr.shape}")
            encoded = seg_id.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<II", *arr.shape))
            fh.write(np.ascontiguousarray(arr).astype("<f8").tobytes())
    os.replace(tmp, path)


def read_cache(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(CACHE_MAGIC)] != CACHE_MAGIC:
        raise IngestionError(f"{path}: not an embedding cache")
    pos = len(CACHE_MAGIC)
    version, count = struct.unpack_from("<II", blob, pos)
    pos += 8
    if version != CACHE_VERSION:
        raise IngestionError(f"{path}: unsupported cache version {version}")
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (id_len,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            seg_id = blob[pos:pos + id_len].decode("utf-8")
            pos += id_len
            n_layers, dim = struct.unpack_from("<II", blob, pos)
            pos += 8
            out[seg_id] = np.frombuffer(blob, dtype="<f8", count=n_layers * dim, offset=pos) \
                .astype(np.float64).reshape(n_layers, dim)
            pos += 8 * n_layers * dim
    except (struct.error, ValueError) as exc:
        raise IngestionError(f"{path}: truncated embedding cache") from exc
    return out


def build_cache(params: BiLMParameters, segments: Sequence[Segment], vocab: Vocabulary,
                use_acoustics: bool = True, batch_size: int = 32) -> dict[str, np.ndarray]:
    outputs = extract_layers_batch(params, segments, vocab, use_acoustics, batch_size)
    return {o.segment_id: o.layer_means() for o in outputs}
