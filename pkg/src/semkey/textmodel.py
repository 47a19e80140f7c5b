"""Tokenizer, additive-smoothed n-gram language model, nucleus truncation, perplexity.

This is the desk-scale stand-in for an LLM: anything that turns a context
into a next-token distribution works with the key and mark modules.
"""

from __future__ import annotations

import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

UNK = "<unk>"
_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class InsufficientDataError(ValueError):
    """Raised when a corpus or sequence is too short for the model order."""


class Vocabulary:
    """Bijective token <-> id map. The OOV sentinel is always the last id (V-1)."""

    def __init__(self, tokens: Sequence[str]):
        tokens = [t for t in tokens if t != UNK] + [UNK]
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be distinct")
        if len(tokens) < 2:
            raise ValueError("vocabulary needs at least one token besides the OOV sentinel")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def unk_id(self) -> int:
        return len(self.tokens) - 1

    def id(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    @classmethod
    def from_corpus(cls, docs: Iterable[str]) -> "Vocabulary":
        """Tokens ordered by descending frequency, ties alphabetical."""
        counts = Counter()
        for doc in docs:
            counts.update(split_words(doc))
        return cls(sorted(counts, key=lambda t: (-counts[t], t)))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line.rstrip("\n")])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(self.tokens) + "\n")


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return [vocab.id(w) for w in split_words(text)]


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.tokens[i] for i in ids)


def read_corpus(path) -> list[str]:
    """One document per line; blank lines are skipped."""
    with open(path, encoding="utf-8") as f:
        return [line.strip() for line in f if line.strip()]


@dataclass(eq=False)
class LanguageModel:
    """Additive-smoothed n-gram model with backoff to the longest observed suffix.

    ``order`` is the number of context tokens (order 1 is a bigram model).
    Counts are kept for every context length 0..order; a query uses the
    longest suffix of the context that occurred in training, so each returned
    conditional is itself a proper smoothed estimate.
    """

    order: int
    smoothing: float
    vocab_size: int
    counts: dict = field(repr=False)

    def __post_init__(self):
        self._cache = lru_cache(maxsize=200_000)(self._raw_dist)

    def _backoff_context(self, context: tuple) -> tuple:
        ctx = context[len(context) - min(len(context), self.order):]
        while ctx and ctx not in self.counts:
            ctx = ctx[1:]
        return ctx

    def _raw_dist(self, ctx: tuple) -> np.ndarray:
        p = np.full(self.vocab_size, self.smoothing, dtype=np.float64)
        entry = self.counts.get(ctx)
        if entry is not None:
            ids, cnt = entry
            p[ids] += cnt
        return p / p.sum()

    def dist(self, context: Sequence[int]) -> np.ndarray:
        """Full conditional next-token distribution (read-only view)."""
        out = self._cache(self._backoff_context(tuple(context)))
        out.flags.writeable = False
        return out

    def prob(self, token: int, context: Sequence[int]) -> float:
        return float(self.dist(context)[token])


def train_ngram(corpus: Sequence[int], order: int, smoothing: float, vocab_size: int | None = None) -> LanguageModel:
    if order < 1:
        raise ValueError("order must be >= 1")
    if smoothing <= 0:
        raise ValueError("smoothing must be > 0")
    corpus = [int(t) for t in corpus]
    if len(corpus) < order:
        raise InsufficientDataError(f"corpus has {len(corpus)} tokens, need at least order={order}")
    V = vocab_size if vocab_size is not None else max(corpus) + 1
    table: dict[tuple, Counter] = defaultdict(Counter)
    for i, tok in enumerate(corpus):
        for n in range(0, min(order, i) + 1):
            table[tuple(corpus[i - n:i])][tok] += 1
    counts = {}
    for ctx, c in table.items():
        ids = np.fromiter(c.keys(), dtype=np.int64)
        cnt = np.fromiter(c.values(), dtype=np.float64)
        counts[ctx] = (ids, cnt)
    return LanguageModel(order=order, smoothing=smoothing, vocab_size=V, counts=counts)


def top_p_filter(probs: np.ndarray, top_p: float) -> np.ndarray:
    """Keep the most probable tokens until their mass reaches ``top_p``, renormalize.

    Sorting is by descending probability, then ascending id, so equal-probability
    tokens on the nucleus boundary enter lowest id first.
    """
    if not 0 < top_p <= 1:
        raise ValueError("top_p must be in (0, 1]")
    probs = np.asarray(probs, dtype=np.float64)
    if top_p >= 1.0:
        return probs / probs.sum()
    order = np.lexsort((np.arange(len(probs)), -probs))
    csum = np.cumsum(probs[order])
    # tolerance so that e.g. 0.6 + 0.3 counts as reaching 0.9
    cut = int(np.searchsorted(csum, top_p * csum[-1] - 1e-12)) + 1
    keep = order[:cut]
    out = np.zeros_like(probs)
    out[keep] = probs[keep]
    return out / out.sum()


def next_dist(lm: LanguageModel, context: Sequence[int], top_p: float = 0.9) -> np.ndarray:
    return top_p_filter(lm.dist(context), top_p)


def sample(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw; stable across numpy versions, unlike ``Generator.choice``."""
    csum = np.cumsum(probs)
    i = int(np.searchsorted(csum, rng.random() * csum[-1], side="right"))
    return min(i, len(probs) - 1)


def perplexity(lm: LanguageModel, tokens: Sequence[int]) -> float:
    """exp of the mean negative log-probability of positions ``order..end``."""
    tokens = list(tokens)
    if len(tokens) <= lm.order:
        raise InsufficientDataError(f"need more than order={lm.order} tokens, got {len(tokens)}")
    nll = 0.0
    for i in range(lm.order, len(tokens)):
        nll -= math.log(lm.prob(tokens[i], tokens[i - lm.order:i]))
    return math.exp(nll / (len(tokens) - lm.order))


def load_builtin(order: int = 3, smoothing: float = 0.1, corpus_path=None):
    """Vocabulary, training token stream and trained LM for a corpus file."""
    from .corpus import CORPUS_PATH

    docs = read_corpus(Path(corpus_path) if corpus_path else CORPUS_PATH)
    vocab = Vocabulary.from_corpus(docs)
    stream = [i for doc in docs for i in tokenize(doc, vocab)]
    lm = train_ngram(stream, order=order, smoothing=smoothing, vocab_size=vocab.size)
    return vocab, lm
