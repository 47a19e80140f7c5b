"""Mark modules: keyed next-token selection and per-token alignment costs.

Each scheme provides ``mark`` (key + next-token distribution -> token) and
``cost`` (key + token -> nonnegative alignment cost, lower means more likely
marked), plus ``null_dist`` describing the cost of a token that was *not*
produced with the key.

* ``ExpMin``: exponential minimum sampling, argmin_i -log(xi_i) / p_i.
* ``Tournament``: simplified tournament sampling over 2**m keyed candidates
  with binary g-values per layer.
* ``WaterMax``: draft ``n_drafts`` chunks by plain sampling and keep the one
  whose tokens have the lowest total ExpMin cost.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ._prf import canonical_hash, prf_uniforms, words_to_unit
from .detect import CostDistribution, binomial_complement
from .textmodel import next_dist, sample

_XI_CACHE: dict[tuple[bytes, int], np.ndarray] = {}
_XI_CACHE_MAX = 1_000_000


def _xi_block(key: bytes, block: int) -> np.ndarray:
    hit = _XI_CACHE.get((key, block))
    if hit is None:
        digest = hashlib.sha256(b"xi\x00" + key + struct.pack(">Q", block)).digest()
        hit = words_to_unit(np.frombuffer(digest, dtype=">u8").astype(np.uint64))
        if len(_XI_CACHE) >= _XI_CACHE_MAX:
            _XI_CACHE.clear()
        _XI_CACHE[(key, block)] = hit
    return hit


def xi(key: bytes, token_id: int) -> float:
    """Keyed uniform in (0, 1) for one token: word ``id % 4`` of SHA-256(key || id // 4)."""
    return float(_xi_block(key, token_id >> 2)[token_id & 3])


def xi_many(key: bytes, token_ids) -> np.ndarray:
    """Vectorised ``xi``: hashes the block range spanned by the ids once."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size == 0:
        return np.empty(0)
    lo, hi = int(ids.min()) >> 2, int(ids.max()) >> 2
    prefix = b"xi\x00" + key
    buf = b"".join(hashlib.sha256(prefix + struct.pack(">Q", b)).digest() for b in range(lo, hi + 1))
    words = words_to_unit(np.frombuffer(buf, dtype=">u8").astype(np.uint64))
    return words[ids - 4 * lo]


def expmin_mark(key: bytes, dist: np.ndarray) -> int:
    """argmin over tokens with p_i > 0 of -log(xi_i) / p_i; ties go to the lower id."""
    dist = np.asarray(dist, dtype=np.float64)
    support = np.flatnonzero(dist > 0)
    if support.size == 0:
        raise ValueError("distribution has no positive entries")
    scores = -np.log(xi_many(key, support)) / dist[support]
    return int(support[int(np.argmin(scores))])


def expmin_cost(key: bytes, token_id: int) -> float:
    return -math.log(xi(key, token_id))


@dataclass(frozen=True)
class TournamentParams:
    m: int = 3
    max_candidates: int = 1 << 12

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if (1 << self.m) > self.max_candidates:
            raise ValueError(f"2**m = {1 << self.m} candidates exceeds cap {self.max_candidates}")

    @property
    def candidates(self) -> int:
        return 1 << self.m


def g_value(key: bytes, layer: int, token_id: int) -> int:
    """Keyed bit g_l(token) in {0, 1}."""
    return canonical_hash("tournament/g", key, layer, token_id)[0] & 1


def tournament_mark(key: bytes, dist: np.ndarray, params: TournamentParams = TournamentParams()) -> int:
    dist = np.asarray(dist, dtype=np.float64)
    csum = np.cumsum(dist)
    u = prf_uniforms(canonical_hash("tournament/candidates", key), params.candidates)
    cands = np.minimum(np.searchsorted(csum, u * csum[-1], side="right"), len(dist) - 1)
    cands = [int(c) for c in cands]
    for layer in range(1, params.m + 1):
        nxt = []
        for pair in range(0, len(cands), 2):
            a, b = cands[pair], cands[pair + 1]
            ga, gb = g_value(key, layer, a), g_value(key, layer, b)
            if ga != gb:
                nxt.append(a if ga > gb else b)
            else:
                coin = canonical_hash("tournament/tie", key, layer, pair)[0] & 1
                nxt.append(a if coin else b)
        cands = nxt
    return cands[0]


def tournament_cost(key: bytes, token_id: int, params: TournamentParams = TournamentParams()) -> float:
    """m minus the number of layers whose g-value for the token is 1."""
    return float(params.m - sum(g_value(key, l, token_id) for l in range(1, params.m + 1)))


@dataclass(frozen=True)
class WatermaxParams:
    n_drafts: int = 8
    chunk_len: int = 16

    def __post_init__(self):
        if self.n_drafts < 1 or self.chunk_len < 1:
            raise ValueError("n_drafts and chunk_len must be >= 1")


def chunk_score(keys: Sequence[bytes], chunk: Sequence[int]) -> float:
    """Sum of -expmin_cost over the chunk (higher means more aligned)."""
    return -sum(expmin_cost(k, t) for k, t in zip(keys, chunk, strict=True))


def watermax_mark(key_for: Callable[[list[int], int], bytes], lm, context: Sequence[int],
                  params: WatermaxParams, rng: np.random.Generator, top_p: float = 0.9,
                  length: int | None = None) -> list[int]:
    """Draft chunks by plain top-p sampling and return the highest-scoring one.

    ``key_for(prefix, pos)`` gives the key for the token following ``prefix``
    at chunk offset ``pos``; it is evaluated on each draft's own prefix, so the
    keys of the returned chunk are recoverable from the text alone.
    """
    length = params.chunk_len if length is None else length
    context = list(context)
    best, best_score = None, -math.inf
    for _ in range(params.n_drafts):
        draft = []
        for _ in range(length):
            draft.append(sample(next_dist(lm, context + draft, top_p), rng))
        keys = [key_for(context + draft[:t], t) for t in range(length)]
        s = chunk_score(keys, draft)
        if s > best_score:
            best, best_score = draft, s
    return best


class MarkModule:
    name: str

    def cost(self, key: bytes, token_id: int) -> float:
        raise NotImplementedError

    def null_dist(self) -> CostDistribution:
        raise NotImplementedError


class ExpMin(MarkModule):
    name = "expmin"

    def mark(self, key, dist, rng=None):
        return expmin_mark(key, dist)

    def cost(self, key, token_id):
        return expmin_cost(key, token_id)

    def null_dist(self):
        return CostDistribution.exponential(1.0)


class Tournament(MarkModule):
    name = "tournament"

    def __init__(self, params: TournamentParams = TournamentParams()):
        self.params = params

    def mark(self, key, dist, rng=None):
        return tournament_mark(key, dist, self.params)

    def cost(self, key, token_id):
        return tournament_cost(key, token_id, self.params)

    def null_dist(self):
        return binomial_complement(self.params.m)


class WaterMax(ExpMin):
    """Chunk-level selection; per-token cost and null distribution are ExpMin's."""

    name = "watermax"

    def __init__(self, params: WatermaxParams = WatermaxParams()):
        self.params = params

    def mark(self, key, dist, rng=None):
        raise TypeError("WaterMax marks whole chunks; use watermax_mark")


SCHEMES = ("expmin", "tournament", "watermax")


def make_mark_module(scheme: str, m: int = 3, n_drafts: int = 8, chunk_len: int = 16) -> MarkModule:
    if scheme == "expmin":
        return ExpMin()
    if scheme == "tournament":
        return Tournament(TournamentParams(m=m))
    if scheme == "watermax":
        return WaterMax(WatermaxParams(n_drafts=n_drafts, chunk_len=chunk_len))
    raise ValueError(f"unknown scheme {scheme!r}; expected one of {', '.join(SCHEMES)}")


def null_cost_dist(scheme: str, m: int = 3) -> CostDistribution:
    return make_mark_module(scheme, m=m).null_dist()
