"""Context embedders and the angle between semantic vectors.

Three backends share one interface (``embed(context)`` -> unit vector):

* ``FeatureHashEmbedder``: signed feature hashing of unigrams and bigrams of
  the last ``window`` tokens. An optional concept map sends synonyms to the
  same feature, standing in for a sentence encoder's notion of meaning.
* ``TableEmbedder``: lookup of precomputed vectors keyed by a 64-bit hash of
  the window ids, with feature-hash fallback on misses.
* ``RemoteEmbedder``: HTTP client for an external sentence-embedding service.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

BOS = -1  # begin-of-sequence pad; never a vocabulary id
DEFAULT_DIM = 384
DEFAULT_WINDOW = 8


class EmbedError(Exception):
    """Base class for embedding backend failures."""


class EmbedTransportError(EmbedError):
    """Remote endpoint unreachable or returned an unusable response."""


class EmbedTimeoutError(EmbedTransportError):
    pass


class EmbedStatusError(EmbedTransportError):
    def __init__(self, status: int, body: str = ""):
        super().__init__(f"embedding service returned HTTP {status}")
        self.status = status
        self.body = body


class EmbedDimensionError(EmbedError):
    pass


class TableFormatError(EmbedError):
    pass


def unit(values) -> np.ndarray:
    """Normalize to unit L2 norm; zero vectors are rejected."""
    v = np.asarray(values, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if not np.isfinite(n) or n == 0.0:
        raise ValueError("cannot normalize a zero or non-finite vector")
    return v / n


def angle(v, v2) -> float:
    """Angle between two vectors in degrees, in [0, 180]."""
    c = float(np.dot(v, v2) / (np.linalg.norm(v) * np.linalg.norm(v2)))
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def padded_window(context: Sequence[int], window: int) -> tuple[int, ...]:
    """Last ``window`` ids, left-padded with ``BOS``."""
    if window < 1:
        raise ValueError("window must be >= 1")
    tail = tuple(int(t) for t in context[max(0, len(context) - window):])
    return (BOS,) * (window - len(tail)) + tail


def window_key(window_ids: Sequence[int]) -> int:
    """Stable 64-bit key of a window: first 8 bytes (big-endian) of SHA-256 over
    the ids as 4-byte big-endian unsigned integers (BOS encodes as 0xFFFFFFFF)."""
    data = b"".join(struct.pack(">I", i & 0xFFFFFFFF) for i in window_ids)
    return int.from_bytes(hashlib.sha256(data).digest()[:8], "big")


@dataclass(frozen=True)
class EmbedderConfig:
    kind: str = "feature_hash"  # feature_hash | table | remote
    dim: int = DEFAULT_DIM
    window: int = DEFAULT_WINDOW
    ngram_range: tuple[int, int] = (1, 2)
    table_path: str | None = None
    lexicon_path: str | None = None
    endpoint: str | None = None
    timeout: float = 10.0

    def __post_init__(self):
        if self.kind not in ("feature_hash", "table", "remote"):
            raise ValueError(f"unknown embedder kind {self.kind!r}")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        lo, hi = self.ngram_range
        if not 1 <= lo <= hi:
            raise ValueError("ngram_range must satisfy 1 <= lo <= hi")
        if self.kind == "remote":
            if not self.endpoint:
                raise ValueError("remote embedder needs an endpoint")
            if self.timeout <= 0:
                raise ValueError("timeout must be > 0")
        if self.kind == "table" and not self.table_path:
            raise ValueError("table embedder needs table_path")


class Embedder:
    dim: int
    window: int

    def embed_window(self, window_ids: tuple[int, ...]) -> np.ndarray:
        raise NotImplementedError

    def embed(self, context: Sequence[int]) -> np.ndarray:
        """Unit embedding of the last ``window`` tokens of ``context``."""
        return self.embed_window(padded_window(context, self.window))

    def embed_positions(self, tokens: Sequence[int], prefix: Sequence[int] = ()) -> np.ndarray:
        """Row i embeds the window preceding ``tokens[i]`` (``prefix`` supplies earlier context)."""
        full = list(prefix) + list(tokens)
        off = len(prefix)
        out = np.empty((len(tokens), self.dim))
        for i in range(len(tokens)):
            out[i] = self.embed(full[: off + i])
        return out


class FeatureHashEmbedder(Embedder):
    """Signed hashing of n-gram features of the window into ``dim`` buckets.

    ``concepts`` maps token id -> concept label; tokens sharing a concept hash
    identically, and ids absent from the map are their own concept. When
    ``categories`` (token id -> coarse class such as a part of speech) is
    given, the same n-grams are also hashed over category labels, so a
    replacement from the same class moves the vector less than an arbitrary one.
    """

    def __init__(self, dim: int = DEFAULT_DIM, window: int = DEFAULT_WINDOW,
                 ngram_range: tuple[int, int] = (1, 2), concepts: Mapping[int, object] | None = None,
                 categories: Mapping[int, object] | None = None):
        if dim < 2:
            raise ValueError("dim must be >= 2")
        self.dim = dim
        self.window = window
        self.ngram_range = tuple(ngram_range)
        self.concepts = dict(concepts or {})
        self.categories = dict(categories) if categories else None
        self._feature_cache: dict[tuple, tuple[int, float]] = {}
        self._cache: dict[tuple, np.ndarray] = {}

    def _labels(self, t: int) -> list:
        if t == BOS:
            return [("bos",)] * (1 if self.categories is None else 2)
        out = [("c", self.concepts[t]) if t in self.concepts else ("t", t)]
        if self.categories is not None:
            out.append(("k", self.categories.get(t, ("t", t))))
        return out

    def _feature(self, gram: tuple) -> tuple[int, float]:
        hit = self._feature_cache.get(gram)
        if hit is None:
            h = hashlib.blake2b(repr(gram).encode(), digest_size=8).digest()
            x = int.from_bytes(h, "big")
            hit = (x % self.dim, 1.0 if (x >> 63) & 1 else -1.0)
            self._feature_cache[gram] = hit
        return hit

    def embed_window(self, window_ids: tuple[int, ...]) -> np.ndarray:
        hit = self._cache.get(window_ids)
        if hit is not None:
            return hit
        labels = [self._labels(t) for t in window_ids]
        v = np.zeros(self.dim)
        lo, hi = self.ngram_range
        for level in range(len(labels[0])):
            seq = [lab[level] for lab in labels]
            for n in range(lo, hi + 1):
                for i in range(len(seq) - n + 1):
                    b, s = self._feature((level, n) + tuple(seq[i:i + n]))
                    v[b] += s
        v = unit(v)
        v.flags.writeable = False
        if len(self._cache) < 500_000:
            self._cache[window_ids] = v
        return v


class TableEmbedder(Embedder):
    """Precomputed vectors keyed by ``window_key``; misses use ``fallback`` and are counted."""

    def __init__(self, vectors: Mapping[int, np.ndarray], dim: int, window: int = DEFAULT_WINDOW,
                 fallback: Embedder | None = None):
        self.dim = dim
        self.window = window
        self.vectors = {}
        for k, v in vectors.items():
            v = np.asarray(v, dtype=np.float64)
            if v.shape != (dim,):
                raise EmbedDimensionError(f"table vector has shape {v.shape}, expected ({dim},)")
            self.vectors[int(k)] = v
        self.fallback = fallback or FeatureHashEmbedder(dim=dim, window=window)
        if self.fallback.dim != dim:
            raise EmbedDimensionError("fallback embedder dimension differs from table")
        self._lock = threading.Lock()
        self.misses = 0

    def embed_window(self, window_ids: tuple[int, ...]) -> np.ndarray:
        v = self.vectors.get(window_key(window_ids))
        if v is not None:
            return unit(v)
        with self._lock:
            self.misses += 1
        return self.fallback.embed_window(window_ids)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"dim={self.dim}\n")
            for k in sorted(self.vectors):
                vals = " ".join(repr(float(x)) for x in self.vectors[k])
                f.write(f"{k:016x} {vals}\n")


def load_table(path, window: int = DEFAULT_WINDOW, fallback: Embedder | None = None) -> TableEmbedder:
    """Parse an embedding-table file (``dim=<d>`` header, then ``<hex key> <d floats>`` lines)."""
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].startswith("dim="):
        raise TableFormatError("first line must be 'dim=<d>'")
    try:
        dim = int(lines[0][4:])
    except ValueError as e:
        raise TableFormatError(f"bad dimension header {lines[0]!r}") from e
    vectors = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        try:
            key = int(parts[0], 16)
            vals = [float(x) for x in parts[1:]]
        except ValueError as e:
            raise TableFormatError(f"line {lineno}: {e}") from e
        if len(vals) != dim:
            raise EmbedDimensionError(f"line {lineno}: {len(vals)} values, expected {dim}")
        vectors[key] = np.array(vals)
    return TableEmbedder(vectors, dim=dim, window=window, fallback=fallback)


class RemoteEmbedder(Embedder):
    """Client for ``POST {"text": ...}`` -> ``{"embedding": [...]}``.

    Windows are detokenized with ``vocab`` before sending. Transient failures
    (connection errors, timeouts, HTTP 5xx) are retried once.
    """

    def __init__(self, endpoint: str, vocab, dim: int = DEFAULT_DIM, window: int = DEFAULT_WINDOW,
                 timeout: float = 10.0, retry_delay: float = 0.05):
        if timeout <= 0:
            raise ValueError("timeout must be > 0")
        self.endpoint = endpoint
        self.vocab = vocab
        self.dim = dim
        self.window = window
        self.timeout = timeout
        self.retry_delay = retry_delay

    def _text(self, window_ids) -> str:
        return " ".join(self.vocab.tokens[i] for i in window_ids if i != BOS)

    def embed_window(self, window_ids: tuple[int, ...]) -> np.ndarray:
        return self.remote_embed(self._text(window_ids))

    def _post(self, text: str) -> np.ndarray:
        body = json.dumps({"text": text}).encode("utf-8")
        req = urllib.request.Request(self.endpoint, data=body, method="POST",
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = resp.read()
        except urllib.error.HTTPError as e:
            raise EmbedStatusError(e.code, e.read().decode("utf-8", "replace")) from e
        except TimeoutError as e:
            raise EmbedTimeoutError(f"no response within {self.timeout}s") from e
        except urllib.error.URLError as e:
            if isinstance(e.reason, TimeoutError):
                raise EmbedTimeoutError(f"no response within {self.timeout}s") from e
            raise EmbedTransportError(str(e.reason)) from e
        try:
            vec = json.loads(payload)["embedding"]
            vec = np.asarray(vec, dtype=np.float64)
        except (ValueError, KeyError, TypeError) as e:
            raise EmbedTransportError(f"malformed response: {e}") from e
        if vec.shape != (self.dim,):
            raise EmbedDimensionError(f"service returned shape {vec.shape}, expected ({self.dim},)")
        try:
            return unit(vec)
        except ValueError as e:
            raise EmbedTransportError("service returned a zero vector") from e

    def remote_embed(self, text: str) -> np.ndarray:
        try:
            return self._post(text)
        except EmbedStatusError as e:
            if e.status < 500:
                raise
        except EmbedTransportError:
            pass
        time.sleep(self.retry_delay)
        return self._post(text)


def concepts_from_lexicon(groups, vocab) -> tuple[dict[int, int], dict[int, str]]:
    """(token id -> group index, token id -> category) for lexicon words present in ``vocab``."""
    concepts, categories = {}, {}
    for gi, (cat, words) in enumerate(groups):
        for w in words:
            if w in vocab.index:
                concepts[vocab.index[w]] = gi
                if cat is not None:
                    categories[vocab.index[w]] = cat
    return concepts, categories


def make_embedder(config: EmbedderConfig, vocab=None) -> Embedder:
    concepts = categories = None
    if config.lexicon_path and vocab is not None:
        from .corpus import read_lexicon
        concepts, categories = concepts_from_lexicon(read_lexicon(config.lexicon_path), vocab)
    fh = FeatureHashEmbedder(dim=config.dim, window=config.window, ngram_range=config.ngram_range,
                             concepts=concepts, categories=categories or None)
    if config.kind == "feature_hash":
        return fh
    if config.kind == "table":
        return load_table(config.table_path, window=config.window, fallback=fh)
    if vocab is None:
        raise ValueError("remote embedder needs a vocabulary to detokenize windows")
    return RemoteEmbedder(config.endpoint, vocab, dim=config.dim, window=config.window,
                          timeout=config.timeout)
