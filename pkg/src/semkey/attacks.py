"""Length-preserving text perturbations.

* ``unrelated_subst``: random positions get uniform vocabulary ids.
* ``related_subst``: random positions get the most probable *different* token
  under the language model, scored on both sides of the position.
* ``synonym_paraphrase``: tokens are swapped for entries of a synonym table
  built from embedding nearest neighbours (a stand-in for round-trip translation).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .embed import angle, padded_window

log = logging.getLogger(__name__)

ATTACK_KINDS = ("none", "unrelated_subst", "related_subst", "synonym_paraphrase")


class SynonymTableError(ValueError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "none"
    count: int | None = None
    rate: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack {self.kind!r}")
        if self.count is not None and self.count < 0:
            raise ValueError("count must be >= 0")
        if self.rate is not None and not 0 <= self.rate <= 1:
            raise ValueError("rate must be in [0, 1]")

    def n_positions(self, n_tokens: int) -> int:
        """Modification count for substitution attacks (``rate`` is a fraction of tokens)."""
        if self.count is not None:
            return min(self.count, n_tokens)
        return int(round((self.rate or 0.0) * n_tokens))


def unrelated_subst(tokens: Sequence[int], count: int, vocab_size: int, seed: int) -> list[int]:
    """Replace ``count`` distinct uniformly chosen positions with uniform ids.

    ``vocab_size`` counts the OOV sentinel (id V-1), which is never drawn.
    """
    out = [int(t) for t in tokens]
    if count > len(out):
        raise ValueError("count exceeds sequence length")
    rng = np.random.default_rng(seed)
    pos = rng.choice(len(out), size=count, replace=False) if count else []
    for i in sorted(int(p) for p in pos):
        out[i] = int(rng.integers(0, vocab_size - 1))
    return out


def _replacement_scores(lm, seq: list[int], i: int) -> np.ndarray:
    """log P(x | left) + sum of log P(right token | context with x) for every x."""
    scores = np.log(lm.dist(seq[max(0, i - lm.order):i]))
    V = lm.vocab_size
    for j in range(i + 1, min(len(seq), i + lm.order + 1)):
        right = seq[j]
        lo = max(0, j - lm.order)
        before, after = seq[lo:i], seq[i + 1:j]
        col = np.empty(V)
        for x in range(V):
            col[x] = lm.dist(before + [x] + after)[right]
        scores += np.log(col)
    return scores


def related_subst(tokens: Sequence[int], count: int, lm, seed: int, prefix: Sequence[int] = (),
                  skipped: list | None = None) -> list[int]:
    """Replace ``count`` random positions by the most probable token that differs from the original.

    Candidates are scored with the left context and the following ``lm.order``
    tokens, similar to masked-LM filling. Only positions with a full left
    context (counting ``prefix``) are eligible. Positions with no admissible
    alternative are left unchanged and appended to ``skipped``.
    """
    prefix = [int(t) for t in prefix]
    seq = prefix + [int(t) for t in tokens]
    off = len(prefix)
    eligible = [i for i in range(len(tokens)) if off + i >= lm.order]
    if count > len(eligible):
        raise ValueError(f"count {count} exceeds {len(eligible)} eligible positions")
    rng = np.random.default_rng(seed)
    chosen = sorted(int(p) for p in rng.choice(eligible, size=count, replace=False)) if count else []
    unk = lm.vocab_size - 1
    for i in chosen:
        scores = _replacement_scores(lm, seq, off + i)
        scores[seq[off + i]] = -math.inf
        scores[unk] = -math.inf
        best = int(np.argmax(scores))
        if not np.isfinite(scores[best]):
            log.info("related_subst: no alternative at position %d", i)
            if skipped is not None:
                skipped.append(i)
            continue
        seq[off + i] = best
    return seq[off:]


def synonym_paraphrase(tokens: Sequence[int], table: Mapping[int, Sequence[int]], rate: float,
                       seed: int) -> list[int]:
    """Independently swap each token that has synonyms, with probability ``rate``."""
    rng = np.random.default_rng(seed)
    out = []
    for t in tokens:
        t = int(t)
        syn = table.get(t)
        # one uniform per token keeps the stream aligned regardless of eligibility
        u = rng.random()
        if syn and u < rate:
            out.append(int(syn[int(rng.integers(len(syn)))]))
        else:
            out.append(t)
    return out


def build_synonym_table(vocab, embedder, max_angle: float = 1.0) -> dict[int, list[int]]:
    """Token id -> other ids whose embeddings lie within ``max_angle`` degrees.

    Each token is embedded as a window filled with that token alone, so the
    comparison sees the token's unigram and self-bigram features.
    """
    ids = [i for i in range(vocab.size) if i != vocab.unk_id]
    E = np.stack([embedder.embed_window((i,) * embedder.window) for i in ids])
    cos = np.clip(E @ E.T, -1.0, 1.0)
    close = np.degrees(np.arccos(cos)) <= max_angle
    table = {}
    for a, i in enumerate(ids):
        nbrs = [ids[b] for b in np.flatnonzero(close[a]) if b != a]
        if nbrs:
            table[i] = nbrs
    return table


def save_synonym_table(table: Mapping[int, Sequence[int]], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in sorted(table):
            f.write(f"{t}: {' '.join(str(x) for x in table[t])}\n")


def load_synonym_table(path) -> dict[int, list[int]]:
    table = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            head, sep, rest = line.partition(":")
            if not sep:
                raise SynonymTableError(f"line {lineno}: missing ':'")
            try:
                table[int(head)] = [int(x) for x in rest.split()]
            except ValueError as e:
                raise SynonymTableError(f"line {lineno}: {e}") from e
    return table


def apply_attack(tokens: Sequence[int], spec: AttackSpec, *, vocab_size: int | None = None, lm=None,
                 table: Mapping[int, Sequence[int]] | None = None, prefix: Sequence[int] = ()) -> list[int]:
    if spec.kind == "none":
        return [int(t) for t in tokens]
    if spec.kind == "unrelated_subst":
        return unrelated_subst(tokens, spec.n_positions(len(tokens)), vocab_size, spec.seed)
    if spec.kind == "related_subst":
        n_elig = sum(1 for i in range(len(tokens)) if len(prefix) + i >= lm.order)
        return related_subst(tokens, min(spec.n_positions(len(tokens)), n_elig), lm, spec.seed, prefix=prefix)
    if table is None:
        raise ValueError("synonym_paraphrase needs a synonym table")
    return synonym_paraphrase(tokens, table, spec.rate if spec.rate is not None else 0.0, spec.seed)


def mean_window_angle(original: Sequence[int], attacked: Sequence[int], embedder,
                      prefix: Sequence[int] = ()) -> float:
    """Mean angle (degrees) between embeddings of corresponding windows before each position."""
    a = list(prefix) + list(original)
    b = list(prefix) + list(attacked)
    off = len(prefix)
    angles = [angle(embedder.embed_window(padded_window(a[:off + i], embedder.window)),
                    embedder.embed_window(padded_window(b[:off + i], embedder.window)))
              for i in range(1, len(original) + 1)]
    return float(np.mean(angles)) if angles else 0.0
