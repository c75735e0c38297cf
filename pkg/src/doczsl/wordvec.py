"""Word-vector files, tokenization and token embedding lookup."""
from __future__ import annotations

import logging
import string
from functools import cached_property
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyDocumentError, FormatError, ParseError

log = logging.getLogger(__name__)

DEFAULT_MAX_WORDS = 512
_PUNCT = string.punctuation + "‘’“”–—…"


@dataclass(frozen=True, eq=False)
class WordVectors:
    tokens: tuple
    vectors: np.ndarray  # (V, dim), read-only
    index: dict = field(repr=False)

    @classmethod
    def from_pairs(cls, pairs):
        tokens = tuple(t for t, _ in pairs)
        vectors = np.array([v for _, v in pairs], dtype=np.float64)
        vectors.setflags(write=False)
        return cls(tokens, vectors, {t: i for i, t in enumerate(tokens)})

    @property
    def dim(self):
        return self.vectors.shape[1]

    @cached_property
    def mean_vector(self):
        return self.vectors.mean(axis=0)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def __getitem__(self, token):
        return self.vectors[self.index[token]]


@dataclass(frozen=True)
class TokenizedDocument:
    class_id: str
    tokens: tuple
    dropped_oov_count: int = 0


@dataclass(frozen=True, eq=False)
class ClassDocument:
    """Tokens that survived OOV handling plus their (M, dim) embedding matrix."""

    class_id: str
    tokens: tuple
    matrix: np.ndarray
    dropped_oov_count: int = 0

    def __len__(self):
        return len(self.tokens)


def parse_wordvec_file(path):
    """Read ``token v1 ... v_dim`` lines. Width is fixed by the first line."""
    pairs, seen, dim = [], set(), None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split(" ")
            token, raw = parts[0], parts[1:]
            if not token or not raw:
                raise ParseError(f"expected a token followed by numbers, got {line[:40]!r}", lineno)
            if dim is None:
                dim = len(raw)
            elif len(raw) != dim:
                raise ParseError(f"token {token!r} has {len(raw)} components, expected {dim}", lineno)
            try:
                vec = np.array([float(x) for x in raw], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(f"non-numeric component for token {token!r}: {exc}", lineno) from None
            if token in seen:
                raise ParseError(f"duplicate token {token!r}", lineno)
            seen.add(token)
            pairs.append((token, vec))
    if not pairs:
        raise FormatError(f"{path}: no word vectors found")
    return WordVectors.from_pairs(pairs)


def write_wordvec_file(wv, path):
    with open(path, "w", encoding="utf-8") as fh:
        for token, vec in zip(wv.tokens, wv.vectors):
            fh.write(token + " " + " ".join(repr(float(x)) for x in vec) + "\n")


def tokenize(text, max_words=DEFAULT_MAX_WORDS):
    tokens = []
    for piece in text.lower().split():
        piece = piece.strip(_PUNCT)
        if piece:
            tokens.append(piece)
            if len(tokens) == max_words:
                break
    return tokens


def embed_tokens(doc, wv, oov_policy="drop"):
    """Look up each token. ``drop`` removes OOV tokens, ``mean`` maps them to the
    mean vector."""
    if oov_policy not in ("drop", "mean"):
        raise ValueError(f"unknown oov_policy {oov_policy!r}")
    kept, rows, dropped = [], [], 0
    mean = wv.mean_vector if oov_policy == "mean" else None
    for tok in doc.tokens:
        i = wv.index.get(tok)
        if i is not None:
            kept.append(tok)
            rows.append(wv.vectors[i])
        elif oov_policy == "mean":
            kept.append(tok)
            rows.append(mean)
        else:
            dropped += 1
    if not rows:
        raise EmptyDocumentError(doc.class_id, f"all {len(doc.tokens)} tokens are out of vocabulary")
    if dropped:
        log.info("class %s: dropped %d OOV tokens", doc.class_id, dropped)
    matrix = np.array(rows, dtype=np.float64)
    matrix.setflags(write=False)
    return ClassDocument(doc.class_id, tuple(kept), matrix, doc.dropped_oov_count + dropped)
