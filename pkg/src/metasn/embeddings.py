"""Frozen word vectors: loading fastText-style ``.vec`` files and averaging."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

OOV_POLICIES = ("skip", "zero")

_PUNCT = re.compile(r"([^\w\s])", re.UNICODE)


class EmbeddingError(ValueError):
    pass


class AllOOVError(EmbeddingError):
    """Every token of a sequence is missing from the vocabulary."""


def tokenize(text: str) -> list[str]:
    """Lowercase, split punctuation into standalone tokens, split on whitespace."""
    return _PUNCT.sub(r" \1 ", text.lower()).split()


@dataclass(frozen=True)
class EmbeddingTable:
    vocab: dict[str, int]
    vectors: np.ndarray
    oov_policy: str = "skip"
    words: tuple[str, ...] = field(default=(), repr=False)

    def __post_init__(self):
        if self.oov_policy not in OOV_POLICIES:
            raise EmbeddingError(f"unknown oov_policy {self.oov_policy!r}")
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.vocab):
            raise EmbeddingError(
                f"vectors shape {self.vectors.shape} does not match vocab size {len(self.vocab)}"
            )
        if not np.all(np.isfinite(self.vectors)):
            raise EmbeddingError("embedding vectors must be finite")
        if not self.words:
            words = [""] * len(self.vocab)
            for w, i in self.vocab.items():
                words[i] = w
            object.__setattr__(self, "words", tuple(words))
        self.vectors.setflags(write=False)

    @classmethod
    def from_dict(cls, mapping: dict[str, Sequence[float]], oov_policy="skip", dtype=np.float64):
        words = list(mapping)
        vectors = np.array([mapping[w] for w in words], dtype=dtype).reshape(len(words), -1)
        return cls({w: i for i, w in enumerate(words)}, vectors, oov_policy)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.vocab)

    def __contains__(self, word):
        return word in self.vocab

    def lookup(self, word: str) -> np.ndarray:
        return self.vectors[self.vocab[word]]

    def with_policy(self, oov_policy: str) -> "EmbeddingTable":
        return EmbeddingTable(self.vocab, self.vectors, oov_policy, self.words)

    def indices(self, tokens: Iterable[str]) -> np.ndarray:
        """Row index per token, -1 for out-of-vocabulary tokens."""
        get = self.vocab.get
        return np.fromiter((get(t, -1) for t in tokens), dtype=np.intp)


def load_vec_file(path, oov_policy: str = "skip", dtype=np.float64) -> EmbeddingTable:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"embedding file not found: {path}")
    with open(path, encoding="utf-8", newline=None) as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise EmbeddingError(f"{path}: malformed header, expected 'count dim'")
        try:
            count, dim = int(header[0]), int(header[1])
        except ValueError:
            raise EmbeddingError(f"{path}: malformed header {' '.join(header)!r}") from None
        if count < 0 or dim <= 0:
            raise EmbeddingError(f"{path}: malformed header {count} {dim}")
        vocab: dict[str, int] = {}
        rows: list[list[float]] = []
        n_lines = 0
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\r\n").rstrip().split(" ")
            if parts == [""]:
                continue
            n_lines += 1
            word, values = parts[0], parts[1:]
            if len(values) != dim:
                raise EmbeddingError(
                    f"{path}:{lineno}: expected {dim} values for {word!r}, got {len(values)}"
                )
            try:
                vec = [float(v) for v in values]
            except ValueError:
                raise EmbeddingError(f"{path}:{lineno}: non-numeric value") from None
            if word in vocab:
                log.warning("%s:%d: duplicate word %r, keeping last occurrence", path, lineno, word)
                rows[vocab[word]] = vec
            else:
                vocab[word] = len(rows)
                rows.append(vec)
    if n_lines != count:
        raise EmbeddingError(f"{path}: header declares {count} words, found {n_lines} lines")
    vectors = np.array(rows, dtype=dtype).reshape(len(rows), dim)
    return EmbeddingTable(vocab, vectors, oov_policy)


def write_vec_file(table: EmbeddingTable, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{len(table)} {table.dim}\n")
        for word, vec in zip(table.words, table.vectors):
            fh.write(word + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def embed_avg(tokens: Sequence[str], table: EmbeddingTable) -> np.ndarray:
    """Mean word vector of ``tokens`` under the table's OOV policy."""
    if len(tokens) == 0:
        raise EmbeddingError("embed_avg: empty token sequence")
    idx = table.indices(tokens)
    known = idx[idx >= 0]
    if table.oov_policy == "skip":
        if known.size == 0:
            raise AllOOVError(f"embed_avg: all {len(tokens)} tokens are out of vocabulary")
        return table.vectors[known].mean(axis=0)
    return table.vectors[known].sum(axis=0) / len(tokens)


def lookup_matrix(tokens: Sequence[str], table: EmbeddingTable) -> np.ndarray:
    """(len(tokens), dim) matrix of word vectors; unknown words give zero rows."""
    if len(tokens) == 0:
        raise EmbeddingError("lookup_matrix: empty token sequence")
    idx = table.indices(tokens)
    out = np.zeros((len(idx), table.dim), dtype=table.vectors.dtype)
    hit = idx >= 0
    out[hit] = table.vectors[idx[hit]]
    return out
