"""Word-vector stores with deterministic out-of-vocabulary fallback and stacking."""
from __future__ import annotations

import logging
import struct
import unicodedata
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DataError, FormatError, ParseError

logger = logging.getLogger(__name__)

OOV_POLICIES = ("zero", "subword-hash")
NGRAM_MIN, NGRAM_MAX = 3, 6

_MASK64 = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_GOLDEN = 0x9E3779B97F4A7C15


def normalize_token(token: str) -> str:
    """Lowercase and strip surrounding punctuation; punctuation-only tokens keep their form."""
    low = token.lower()
    start, end = 0, len(low)
    while start < end and unicodedata.category(low[start]).startswith("P"):
        start += 1
    while end > start and unicodedata.category(low[end - 1]).startswith("P"):
        end -= 1
    return low[start:end] or low


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & _MASK64
    return h


def char_ngrams(word: str, nmin: int = NGRAM_MIN, nmax: int = NGRAM_MAX) -> list[str]:
    wrapped = f"<{word}>"
    grams = []
    for n in range(nmin, nmax + 1):
        grams.extend(wrapped[i : i + n] for i in range(len(wrapped) - n + 1))
    return grams


def _splitmix64(seed: int, count: int) -> np.ndarray:
    idx = np.arange(1, count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed) + idx * np.uint64(_GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return z


def hashed_unit_vector(seed: int, dim: int) -> np.ndarray:
    """Isotropic unit vector drawn from a splitmix64 stream (Box-Muller)."""
    z = _splitmix64(seed, 2 * dim)
    u = ((z >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53  # (0, 1]
    u1, u2 = u[0::2], u[1::2]
    v = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
    return v / np.linalg.norm(v)


def subword_vector(word: str, dim: int) -> np.ndarray:
    grams = char_ngrams(word)
    if not grams:
        return np.zeros(dim)
    acc = np.zeros(dim)
    for g in grams:
        acc += hashed_unit_vector(fnv1a64(g.encode("utf-8")), dim)
    acc /= len(grams)
    norm = np.linalg.norm(acc)
    return acc / norm if norm > 0 else acc


class EmbeddingStore:
    """Immutable token -> vector table of dimension ``dim``."""

    def __init__(self, vocab: dict[str, np.ndarray], dim: int, oov_policy: str = "zero", source: str = ""):
        if dim <= 0:
            raise DataError("embedding dimension must be positive")
        if oov_policy not in OOV_POLICIES:
            raise DataError(f"unknown OOV policy {oov_policy!r}")
        self.dim = int(dim)
        self.oov_policy = oov_policy
        self.source = source
        words = sorted(vocab)
        self._index = {w: i for i, w in enumerate(words)}
        self._matrix = np.zeros((len(words), self.dim), dtype=np.float32)
        for i, w in enumerate(words):
            v = np.asarray(vocab[w], dtype=np.float32)
            if v.shape != (self.dim,):
                raise DataError(f"vector for {w!r} has shape {v.shape}, expected ({self.dim},)")
            self._matrix[i] = v
        self._matrix.setflags(write=False)
        self._oov = lru_cache(maxsize=65536)(self._oov_vector)

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, token: str) -> bool:
        return normalize_token(token) in self._index

    @property
    def words(self) -> list[str]:
        return list(self._index)

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    def _oov_vector(self, key: str) -> np.ndarray:
        if self.oov_policy == "zero":
            v = np.zeros(self.dim, dtype=np.float32)
        else:
            v = subword_vector(key, self.dim).astype(np.float32)
        v.setflags(write=False)
        return v

    def lookup(self, token: str) -> np.ndarray:
        key = normalize_token(token)
        i = self._index.get(key)
        if i is not None:
            return self._matrix[i]
        return self._oov(key)

    def lookup_many(self, tokens: Iterable[str]) -> np.ndarray:
        rows = [self.lookup(t) for t in tokens]
        if not rows:
            return np.zeros((0, self.dim), dtype=np.float32)
        return np.stack(rows)

    def __repr__(self):
        return f"EmbeddingStore(dim={self.dim}, vocab={len(self)}, oov={self.oov_policy!r}, source={self.source!r})"


class StackedStore:
    """Concatenation of several stores, looked up part by part."""

    def __init__(self, parts: Sequence):
        if not parts:
            raise DataError("stack needs at least one store")
        self.parts = list(parts)
        self.dim = sum(p.dim for p in self.parts)
        self.source = "+".join(getattr(p, "source", "") for p in self.parts)

    def lookup(self, token: str) -> np.ndarray:
        if len(self.parts) == 1:
            return self.parts[0].lookup(token)
        return np.concatenate([p.lookup(token) for p in self.parts])

    def lookup_many(self, tokens: Iterable[str]) -> np.ndarray:
        tokens = list(tokens)
        return np.concatenate([p.lookup_many(tokens) for p in self.parts], axis=1)

    def __repr__(self):
        return f"StackedStore(dim={self.dim}, parts={self.parts!r})"


def lookup(store, token: str) -> np.ndarray:
    return store.lookup(token)


def stack(stores: Sequence) -> StackedStore:
    return StackedStore(stores)


def parse_vector_lines(lines, oov_policy: str = "zero", source: str = "", path=None) -> EmbeddingStore:
    it = iter(enumerate(lines, start=1))
    try:
        _, header = next(it)
    except StopIteration:
        raise ParseError("empty vector file", path, 1) from None
    try:
        size, dim = (int(x) for x in header.split())
    except ValueError:
        raise ParseError("header must be '<vocab_size> <dim>'", path, 1) from None
    if dim <= 0:
        raise ParseError(f"invalid dimension {dim}", path, 1)
    vocab: dict[str, np.ndarray] = {}
    rows = 0
    for lineno, line in it:
        line = line.rstrip("\r\n").rstrip(" ")
        if not line.strip():
            continue
        fields = line.split(" ")
        word = fields[0].lower()
        values = fields[1:]
        if len(values) != dim:
            raise ParseError(f"expected {dim} values, got {len(values)}", path, lineno)
        try:
            vec = np.array([float(v) for v in values], dtype=np.float32)
        except ValueError:
            raise ParseError("non-numeric vector component", path, lineno) from None
        if word in vocab:
            logger.warning("%s:%d: duplicate token %r after lowercasing; later row wins", path, lineno, word)
        vocab[word] = vec
        rows += 1
    if not vocab:
        raise ParseError("empty vocabulary", path)
    if rows != size:
        logger.warning("%s: header declares %d rows, found %d", path, size, rows)
    return EmbeddingStore(vocab, dim, oov_policy, source)


def load_vectors(path, oov_policy: str = "zero") -> EmbeddingStore:
    """Load a text vector file (``<vocab_size> <N>`` header, then one row per token)."""
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        return parse_vector_lines(f, oov_policy, source=path.stem, path=path)


def save_vectors(path, store: EmbeddingStore) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"{len(store)} {store.dim}\n")
        for w in store.words:
            vals = " ".join(repr(float(x)) for x in store.lookup(w))
            f.write(f"{w} {vals}\n")


_EMB_MAGIC = b"EMB1"


def save_binary(path, store: EmbeddingStore) -> None:
    """Cache a store as ``EMB1`` + N + vocab size + sorted (token, vector) records."""
    with open(path, "wb") as f:
        f.write(_EMB_MAGIC)
        f.write(struct.pack("<II", store.dim, len(store)))
        for w in store.words:  # already sorted
            raw = w.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(store.matrix[store._index[w]].astype("<f4").tobytes())


def load_binary(path, oov_policy: str = "zero", source: Optional[str] = None) -> EmbeddingStore:
    data = Path(path).read_bytes()
    if data[:4] != _EMB_MAGIC:
        raise FormatError(f"{path}: bad magic")
    try:
        dim, size = struct.unpack_from("<II", data, 4)
        off = 12
        vocab = {}
        for _ in range(size):
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            if off + n + 4 * dim > len(data):
                raise FormatError(f"{path}: truncated")
            word = data[off : off + n].decode("utf-8")
            off += n
            vocab[word] = np.frombuffer(data, dtype="<f4", count=dim, offset=off).astype(np.float32)
            off += 4 * dim
    except struct.error:
        raise FormatError(f"{path}: truncated") from None
    if off != len(data):
        raise FormatError(f"{path}: trailing bytes")
    if not vocab:
        raise DataError(f"{path}: empty vocabulary")
    return EmbeddingStore(vocab, dim, oov_policy, source if source is not None else Path(path).stem)
