"""Key modules: semantic SimHash keys, sliding-window token hashing, fixed keys.

Every module exposes ``k`` and ``candidate_keys(tokens, prefix)``, returning
for each position the ``k`` keys indexed 1..k derived from the context
preceding that position. Generation picks one index per step; detection
takes the minimum cost over all of them.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from ._prf import canonical_hash, gaussian_from_seed
from .embed import DEFAULT_DIM, DEFAULT_WINDOW, Embedder, padded_window

SALT_ENV = "SEMKEY_SALT"
KEY_BYTES = 32


def salt_from_env(env=os.environ) -> bytes:
    raw = env.get(SALT_ENV)
    if not raw:
        raise KeyError(f"{SALT_ENV} is not set")
    return bytes.fromhex(raw)


def key_match_prob(theta_degrees: float, b: int) -> float:
    """Probability that b-bit SimHash keys agree for vectors at the given angle."""
    if not 0 <= theta_degrees <= 180:
        raise ValueError("theta must be in [0, 180] degrees")
    return (1.0 - theta_degrees / 180.0) ** b


@dataclass(frozen=True)
class SimKeyParams:
    salt: bytes = field(repr=False)
    b: int = 4
    k: int = 4
    d: int = DEFAULT_DIM

    def __post_init__(self):
        if self.b < 1 or self.k < 1:
            raise ValueError("b and k must be >= 1")
        if not self.salt:
            raise ValueError("salt must be nonempty")
        if self.d < 1:
            raise ValueError("d must be >= 1")


def projection_seed(idx: int, j: int, salt: bytes) -> bytes:
    return canonical_hash("simkey/projection", idx, j, salt)


@lru_cache(maxsize=4096)
def projection(idx: int, j: int, salt: bytes, d: int) -> np.ndarray:
    r = gaussian_from_seed(projection_seed(idx, j, salt), d)
    r.flags.writeable = False
    return r


def projections(params: SimKeyParams, idx: int) -> np.ndarray:
    """(b, d) matrix of projection vectors r_1..r_b for one key index."""
    return np.stack([projection(idx, j, params.salt, params.d) for j in range(1, params.b + 1)])


def key_from_bits(bits: Sequence[bool], idx: int, salt: bytes) -> bytes:
    return canonical_hash("simkey/key", bytes(1 if x else 0 for x in bits), idx, salt)


def sign_bits(v: np.ndarray, params: SimKeyParams, idx: int) -> np.ndarray:
    """sign(<v, r_j>) for j = 1..b as booleans (True = +1, with sign(0) = +1)."""
    return projections(params, idx) @ np.asarray(v, dtype=np.float64) >= 0.0


def simkey(v: np.ndarray, idx: int, params: SimKeyParams) -> bytes:
    if not 1 <= idx <= params.k:
        raise ValueError(f"key index {idx} outside 1..{params.k}")
    return key_from_bits(sign_bits(v, params, idx), idx, params.salt)


def standard_hash_key(window: Sequence[int], idx: int, salt: bytes) -> bytes:
    return canonical_hash("stdhash/key", b"".join(int(t).to_bytes(8, "big", signed=True) for t in window),
                          idx, salt)


def fixed_key(idx: int, salt: bytes) -> bytes:
    return canonical_hash("fixed/key", idx, salt)


class KeyModule:
    name: str
    k: int

    def key(self, context: Sequence[int], idx: int) -> bytes:
        raise NotImplementedError

    def candidate_keys(self, tokens: Sequence[int], prefix: Sequence[int] = ()) -> list[list[bytes]]:
        full = list(prefix) + list(tokens)
        off = len(prefix)
        return [[self.key(full[: off + i], idx) for idx in range(1, self.k + 1)]
                for i in range(len(tokens))]


class SimKeyModule(KeyModule):
    """SimHash over an embedding of the preceding window."""

    name = "simkey"

    def __init__(self, params: SimKeyParams, embedder: Embedder):
        if embedder.dim != params.d:
            raise ValueError(f"embedder dim {embedder.dim} != params.d {params.d}")
        self.params = params
        self.embedder = embedder
        self.k = params.k
        self._proj = np.concatenate([projections(params, i) for i in range(1, params.k + 1)])
        self._keys: dict[tuple, bytes] = {}

    @property
    def window(self) -> int:
        return self.embedder.window

    def _key(self, bits: tuple, idx: int) -> bytes:
        hit = self._keys.get((bits, idx))
        if hit is None:
            hit = self._keys[(bits, idx)] = key_from_bits(bits, idx, self.params.salt)
        return hit

    def key(self, context: Sequence[int], idx: int) -> bytes:
        if not 1 <= idx <= self.k:
            raise ValueError(f"key index {idx} outside 1..{self.k}")
        bits = tuple(bool(x) for x in sign_bits(self.embedder.embed(context), self.params, idx))
        return self._key(bits, idx)

    def candidate_keys(self, tokens, prefix=()):
        if not len(tokens):
            return []
        emb = self.embedder.embed_positions(tokens, prefix)
        b = self.params.b
        signs = (emb @ self._proj.T) >= 0.0
        out = []
        for row in signs:
            out.append([self._key(tuple(bool(x) for x in row[(i - 1) * b:i * b]), i)
                        for i in range(1, self.k + 1)])
        return out


class StandardHashKeyModule(KeyModule):
    """Cryptographic hash of the last ``window`` token ids."""

    name = "standard_hash"

    def __init__(self, salt: bytes, k: int = 1, window: int = DEFAULT_WINDOW):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.salt = salt
        self.k = k
        self.window = window

    def key(self, context, idx):
        if not 1 <= idx <= self.k:
            raise ValueError(f"key index {idx} outside 1..{self.k}")
        return standard_hash_key(padded_window(context, self.window), idx, self.salt)


class FixedKeyModule(KeyModule):
    """Context-independent pool of ``k`` keys."""

    name = "fixed"

    def __init__(self, salt: bytes, k: int = 1):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.salt = salt
        self.k = k
        self._pool = [fixed_key(i, salt) for i in range(1, k + 1)]

    def key(self, context, idx):
        if not 1 <= idx <= self.k:
            raise ValueError(f"key index {idx} outside 1..{self.k}")
        return self._pool[idx - 1]

    def candidate_keys(self, tokens, prefix=()):
        return [list(self._pool) for _ in range(len(tokens))]


def make_key_module(kind: str, salt: bytes, embedder: Embedder | None = None,
                    k: int = 4, b: int = 4, window: int = DEFAULT_WINDOW) -> KeyModule:
    if kind == "simkey":
        if embedder is None:
            raise ValueError("simkey needs an embedder")
        return SimKeyModule(SimKeyParams(salt=salt, b=b, k=k, d=embedder.dim), embedder)
    if kind == "standard_hash":
        return StandardHashKeyModule(salt, k=k, window=window)
    if kind == "fixed":
        return FixedKeyModule(salt, k=k)
    raise ValueError(f"unknown key module {kind!r}")
