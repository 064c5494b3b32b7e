"""Lexical side of the biLM input: vocabulary, character maps, corpora, batches."""

from __future__ import annotations

import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .errors import ContractError, IngestionError

BOS, EOS, UNK = "<bos>", "<eos>", "<unk>"
RESERVED = (BOS, EOS, UNK)
BOS_ID, EOS_ID, UNK_ID = 0, 1, 2

# character alphabet: raw UTF-8 bytes plus four specials
BOW_CHAR = 256
EOW_CHAR = 257
PAD_CHAR = 258
UNK_CHAR = 259
ALPHABET_SIZE = 260

DEFAULT_MAX_CHARS = 16

NO_TARGET = -1


def tokenize(line: str) -> list[str]:
    return line.lower().split()


class Vocabulary:
    """Token <-> id bijection with reserved ids for <bos>, <eos>, <unk>."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            if tok in self.stoi:
                raise IngestionError(f"duplicate vocabulary entry {tok!r}")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    @classmethod
    def build(cls, lines: Iterable[str], min_count: int = 1) -> "Vocabulary":
        """Frequency-ordered vocabulary; ties broken lexicographically."""
        if min_count < 1:
            raise ContractError("min_count must be >= 1")
        counts: Counter[str] = Counter()
        n_lines = 0
        for line in lines:
            n_lines += 1
            counts.update(tokenize(line))
        if n_lines == 0 or not counts:
            raise IngestionError("cannot build a vocabulary from an empty corpus")
        kept = sorted((t for t, c in counts.items() if c >= min_count and t not in RESERVED),
                      key=lambda t: (-counts[t], t))
        return cls(kept)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.id(t) for t in tokens], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[int(i)] for i in ids]

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.itos[len(RESERVED):]:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


def to_char_map(token: str, max_chars: int = DEFAULT_MAX_CHARS) -> np.ndarray:
    """Character-id row ``[BOW, bytes..., EOW, PAD...]`` of length ``max_chars``.

    Long tokens are truncated so the end-of-word marker always survives.
    Characters that cannot be UTF-8 encoded (lone surrogates) become UNK_CHAR.
    """
    if max_chars < 3:
        raise ContractError("max_chars must leave room for both markers and one character")
    ids: list[int] = []
    for ch in token:
        try:
            ids.extend(ch.encode("utf-8"))
        except UnicodeEncodeError:
            ids.append(UNK_CHAR)
    ids = ids[:max_chars - 2]
    row = np.full(max_chars, PAD_CHAR, dtype=np.int64)
    row[0] = BOW_CHAR
    row[1:1 + len(ids)] = ids
    row[1 + len(ids)] = EOW_CHAR
    return row


def char_maps(tokens: Sequence[str], max_chars: int = DEFAULT_MAX_CHARS) -> np.ndarray:
    if not tokens:
        return np.zeros((0, max_chars), dtype=np.int64)
    return np.stack([to_char_map(t, max_chars) for t in tokens])


@dataclass
class TextCorpus:
    """Sentences wrapped in <bos> ... <eos>.

    ``words`` keeps the surface strings (the char-CNN reads spelling even
    for tokens that map to <unk>). ``acoustic`` optionally holds, per
    sentence, a ``[len, d, l_a]`` array aligned with ``words``.
    """

    sentences: list[np.ndarray]
    words: list[list[str]]
    vocab: Vocabulary
    split: str = "train"
    source: Optional[str] = None
    acoustic: Optional[list[np.ndarray]] = None
    ids: Optional[list[str]] = None

    def __post_init__(self) -> None:
        if self.split not in ("train", "valid", "test"):
            raise ContractError(f"unknown split {self.split!r}")
        if len(self.sentences) != len(self.words):
            raise ContractError("sentences and words disagree in length")
        if self.acoustic is not None and len(self.acoustic) != len(self.sentences):
            raise ContractError("acoustic list must align with sentences")

    @classmethod
    def from_token_lists(cls, token_lists: Sequence[Sequence[str]], vocab: Vocabulary, split: str = "train",
                         source: Optional[str] = None, acoustic: Optional[list[np.ndarray]] = None,
                         ids: Optional[list[str]] = None) -> "TextCorpus":
        words = [[BOS, *toks, EOS] for toks in token_lists]
        sentences = [vocab.encode(w) for w in words]
        return cls(sentences, words, vocab, split, source, acoustic, ids)

    @classmethod
    def from_lines(cls, lines: Iterable[str], vocab: Vocabulary, split: str = "train",
                   source: Optional[str] = None) -> "TextCorpus":
        token_lists = [tokenize(line) for line in lines]
        token_lists = [t for t in token_lists if t]
        if not token_lists:
            raise IngestionError(f"no sentences in {source or 'corpus'}")
        return cls.from_token_lists(token_lists, vocab, split, source)

    @classmethod
    def read(cls, path: str | os.PathLike, vocab: Vocabulary, split: str = "train") -> "TextCorpus":
        with open(path, encoding="utf-8") as fh:
            return cls.from_lines(fh, vocab, split, os.fspath(path))

    def __len__(self) -> int:
        return len(self.sentences)

    def without_acoustics(self) -> "TextCorpus":
        return TextCorpus(self.sentences, self.words, self.vocab, self.split, self.source, None, self.ids)

    def n_targets(self) -> int:
        """Scored positions per direction over one pass."""
        return int(sum(len(s) - 1 for s in self.sentences))


@dataclass
class Batch:
    """Fixed-shape ``[batch_size, unroll]`` slice of a corpus.

    ``mask`` flags real (non-padding) input positions. Target arrays hold
    NO_TARGET where a position is not scored; ``fwd_mask`` / ``bwd_mask``
    are the corresponding 0/1 weights.
    """

    tokens: np.ndarray
    chars: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray
    fwd_targets: np.ndarray
    bwd_targets: np.ndarray
    acoustic: Optional[np.ndarray] = None
    rows: list[int] = field(default_factory=list)

    @property
    def fwd_mask(self) -> np.ndarray:
        return (self.fwd_targets != NO_TARGET).astype(np.float64)

    @property
    def bwd_mask(self) -> np.ndarray:
        return (self.bwd_targets != NO_TARGET).astype(np.float64)

    @property
    def shape(self) -> tuple[int, int]:
        return self.tokens.shape

    def n_targets(self) -> int:
        return int((self.fwd_targets != NO_TARGET).sum())


def _windows(length: int, unroll: int) -> list[tuple[int, int]]:
    """Chunks of at most ``unroll`` positions overlapping by one token.

    Consecutive chunks share their boundary token so each forward and each
    backward target is scored exactly once.
    """
    if length <= unroll:
        return [(0, length)]
    spans, start = [], 0
    while start < length - 1:
        end = min(start + unroll, length)
        spans.append((start, end))
        start = end - 1
    return spans


def batch_sentences(
    corpus: TextCorpus,
    batch_size: int,
    unroll: int,
    max_chars: int = DEFAULT_MAX_CHARS,
    rng: Optional[np.random.Generator] = None,
) -> Iterator[Batch]:
    """Yield padded batches; shuffles sentence chunks when ``rng`` is given.

    Each batch row starts at a sentence (or chunk) boundary, so recurrent
    state is reset per row. Short final batches are padded with empty rows.
    """
    if batch_size < 1 or unroll < 2:
        raise ContractError("batch_size must be >= 1 and unroll >= 2")
    chunks = [(i, s, e) for i, sent in enumerate(corpus.sentences) for s, e in _windows(len(sent), unroll)]
    order = np.arange(len(chunks))
    if rng is not None:
        order = rng.permutation(len(chunks))
    acoustic_shape = None
    if corpus.acoustic is not None and corpus.acoustic:
        acoustic_shape = corpus.acoustic[0].shape[1:]
    char_cache: dict[str, np.ndarray] = {}

    for start in range(0, len(chunks), batch_size):
        picked = [chunks[j] for j in order[start:start + batch_size]]
        tokens = np.zeros((batch_size, unroll), dtype=np.int64)
        chars = np.full((batch_size, unroll, max_chars), PAD_CHAR, dtype=np.int64)
        mask = np.zeros((batch_size, unroll))
        lengths = np.zeros(batch_size, dtype=np.int64)
        fwd = np.full((batch_size, unroll), NO_TARGET, dtype=np.int64)
        bwd = np.full((batch_size, unroll), NO_TARGET, dtype=np.int64)
        acoustic = None
        if acoustic_shape is not None:
            acoustic = np.zeros((batch_size, unroll, *acoustic_shape))
        rows = []
        for r, (i, s, e) in enumerate(picked):
            ids = corpus.sentences[i][s:e]
            n = len(ids)
            rows.append(i)
            tokens[r, :n] = ids
            for k, w in enumerate(corpus.words[i][s:e]):
                if w not in char_cache:
                    char_cache[w] = to_char_map(w, max_chars)
                chars[r, k] = char_cache[w]
            mask[r, :n] = 1.0
            lengths[r] = n
            fwd[r, :n - 1] = ids[1:]
            bwd[r, 1:n] = ids[:-1]
            if acoustic is not None:
                acoustic[r, :n] = corpus.acoustic[i][s:e]
        yield Batch(tokens, chars, mask, lengths, fwd, bwd, acoustic, rows)
