"""Watermark detection and p-values.

Per position, the key module proposes ``k`` candidate keys from the preceding
context; the position's cost is the minimum mark cost over them. Under the
null (text not produced with the key) the per-candidate cost follows the
scheme's null distribution D, the per-position minimum has CDF
``1 - (1 - F(y))**k``, and positions are treated as independent, so the total
cost is an n-fold convolution. Exponential costs have a closed form (a Gamma
CDF); discrete costs go through the convolution engine.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.signal import fftconvolve

PRUNE_BELOW = 1e-15
DEFAULT_SUPPORT_CAP = 5_000_000
_DIRECT_CONV_LIMIT = 4_000_000


class SupportTooLargeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CostDistribution:
    """Discrete cost distribution, or a continuous Exp(rate) tag.

    ``bin_width`` marks a discretized continuous law: each atom stands for a
    cell of that width centred on it, and the CDF interpolates linearly inside
    cells. ``pruned`` is probability mass dropped by the convolution engine.
    """

    support: np.ndarray = field(default_factory=lambda: np.empty(0))
    probs: np.ndarray = field(default_factory=lambda: np.empty(0))
    rate: float | None = None
    bin_width: float | None = None
    pruned: float = 0.0

    def __post_init__(self):
        if self.rate is not None:
            if self.rate <= 0:
                raise ValueError("rate must be > 0")
            return
        s = np.asarray(self.support, dtype=np.float64)
        p = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "support", s)
        object.__setattr__(self, "probs", p)
        if s.shape != p.shape or s.ndim != 1 or s.size == 0:
            raise ValueError("support and probs must be nonempty 1-D arrays of equal length")
        if np.any(np.diff(s) <= 0):
            raise ValueError("support must be strictly increasing")
        if np.any(p < 0):
            raise ValueError("probabilities must be nonnegative")
        if abs(p.sum() + self.pruned - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {p.sum() + self.pruned!r}, not 1")

    @classmethod
    def exponential(cls, rate: float = 1.0) -> "CostDistribution":
        return cls(rate=rate)

    @property
    def is_continuous(self) -> bool:
        return self.rate is not None

    def cdf(self, y: float) -> float:
        if self.is_continuous:
            return 0.0 if y <= 0 else -math.expm1(-self.rate * y)
        s, p = self.support, self.probs
        if self.bin_width is None:
            j = int(np.searchsorted(s, y + 1e-9 * max(1.0, abs(y)), side="right"))
            return float(p[:j].sum())
        h = self.bin_width
        lo = s - h / 2
        j = int(np.searchsorted(lo, y, side="right")) - 1
        if j < 0:
            return 0.0
        frac = min(1.0, (y - lo[j]) / h)
        return float(p[:j].sum() + frac * p[j])

    def cdf_values(self) -> np.ndarray:
        return np.cumsum(self.probs)

    def mean(self) -> float:
        if self.is_continuous:
            return 1.0 / self.rate
        return float(self.support @ self.probs)

    def to_dict(self) -> dict:
        if self.is_continuous:
            return {"kind": "exponential", "rate": self.rate}
        return {"kind": "discrete", "support": self.support.tolist(), "probs": self.probs.tolist(),
                "bin_width": self.bin_width}


def binomial_complement(m: int) -> CostDistribution:
    """Law of m - Binomial(m, 1/2), which is Binomial(m, 1/2) again."""
    probs = np.array([math.comb(m, c) for c in range(m + 1)], dtype=np.float64) / 2.0 ** m
    return CostDistribution(np.arange(m + 1, dtype=np.float64), probs)


def discretize(rate: float = 1.0, bins: int = 10_000, cap: float = 30.0) -> CostDistribution:
    """Exp(rate) binned on [0, cap] into cells of width cap/bins, each atom at its cell
    midpoint, plus the tail mass beyond ``cap`` in the overflow cell [cap, cap + h)."""
    if bins < 10:
        raise ValueError("bins must be >= 10")
    if cap <= 0:
        raise ValueError("cap must be > 0")
    h = cap / bins
    edges = np.arange(bins + 1) * h
    surv = np.exp(-rate * edges)
    masses = np.append(surv[:-1] - surv[1:], surv[-1])
    support = (np.arange(bins + 1) + 0.5) * h
    masses = masses / masses.sum()
    return CostDistribution(support, masses, bin_width=h)


def min_of_k_cdf(F: CostDistribution, k: int) -> CostDistribution:
    """Law of the minimum of k independent draws: F1(y) = 1 - (1 - F(y))**k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if F.is_continuous:
        raise ValueError("min_of_k_cdf needs a discrete distribution; discretize() the continuous law first")
    cdf = np.minimum(F.cdf_values(), 1.0)
    surv = np.maximum(1.0 - cdf, 0.0)
    cdf1 = 1.0 - surv ** k
    probs = np.diff(cdf1, prepend=0.0)
    probs = np.maximum(probs, 0.0)
    probs /= probs.sum()
    return CostDistribution(F.support, probs, bin_width=F.bin_width)


def _as_lattice(F: CostDistribution):
    """(origin, step, dense pmf) if the support lies on a regular grid, else None."""
    s = F.support
    if s.size == 1:
        return s[0], 1.0, F.probs.copy()
    step = float(np.min(np.diff(s)))
    j = (s - s[0]) / step
    ji = np.rint(j)
    if np.max(np.abs(j - ji)) > 1e-6:
        return None
    dense = np.zeros(int(ji[-1]) + 1)
    dense[ji.astype(np.int64)] = F.probs
    return float(s[0]), step, dense


def _conv(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.size * b.size <= _DIRECT_CONV_LIMIT:
        return np.convolve(a, b)
    out = fftconvolve(a, b)
    np.maximum(out, 0.0, out=out)
    return out


def _trim(p: np.ndarray, threshold: float) -> tuple[np.ndarray, int]:
    """Drop leading/trailing entries below ``threshold``; returns (kept, leading offset)."""
    big = np.flatnonzero(p >= threshold)
    if big.size == 0:
        return p, 0
    return p[big[0]:big[-1] + 1], int(big[0])


def convolve_power(F1: CostDistribution, n: int, support_cap: int = DEFAULT_SUPPORT_CAP,
                   prune_below: float = PRUNE_BELOW) -> CostDistribution:
    """Law of the sum of n independent draws from F1.

    Lattice supports use dense convolutions (binary powering, so O(log n)
    convolutions); edge atoms below ``prune_below`` are dropped after each
    step and the dropped mass is recorded in ``pruned``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if F1.is_continuous:
        raise ValueError("convolution needs a discrete distribution; discretize() first")
    lat = _as_lattice(F1)
    if lat is None:
        return _convolve_power_generic(F1, n, support_cap)
    origin, step, base = lat
    if (base.size - 1) * n + 1 > support_cap:
        raise SupportTooLargeError(
            f"sum support of {(base.size - 1) * n + 1} points exceeds cap {support_cap}; use a coarser discretization")

    def pow_(p: np.ndarray, off: int, e: int):
        # returns (pmf, offset in lattice units of the first entry)
        if e == 1:
            return p, off
        half, half_off = pow_(p, off, e // 2)
        out = _conv(half, half)
        out_off = 2 * half_off
        if e % 2:
            out = _conv(out, p)
            out_off += off
        out, lead = _trim(out, prune_below)
        return out, out_off + lead

    pmf, off = pow_(base, 0, n)
    kept = float(pmf.sum())
    pruned = max(0.0, 1.0 - kept)
    support = n * origin + (off + np.arange(pmf.size)) * step
    nz = pmf > 0
    return CostDistribution(support[nz], pmf[nz], bin_width=F1.bin_width, pruned=pruned)


def _convolve_power_generic(F1: CostDistribution, n: int, support_cap: int) -> CostDistribution:
    s, p = F1.support, F1.probs
    for _ in range(n - 1):
        sums = (s[:, None] + F1.support[None, :]).ravel()
        mass = (p[:, None] * F1.probs[None, :]).ravel()
        keys = np.round(sums, 9)
        s, inv = np.unique(keys, return_inverse=True)
        if s.size > support_cap:
            raise SupportTooLargeError(f"sum support exceeds cap {support_cap}; discretize on a grid")
        p = np.bincount(inv, weights=mass)
    p = p / p.sum()
    return CostDistribution(s, p, bin_width=F1.bin_width)


_POWER_CACHE: OrderedDict = OrderedDict()
_POWER_CACHE_MAX = 64


def _cached_power(F1: CostDistribution, n: int, support_cap: int) -> CostDistribution:
    key = (F1.support.tobytes(), F1.probs.tobytes(), F1.bin_width, n, support_cap)
    hit = _POWER_CACHE.get(key)
    if hit is None:
        hit = convolve_power(F1, n, support_cap)
        _POWER_CACHE[key] = hit
        if len(_POWER_CACHE) > _POWER_CACHE_MAX:
            _POWER_CACHE.popitem(last=False)
    else:
        _POWER_CACHE.move_to_end(key)
    return hit


def convolve_pvalue(total_cost: float, n: int, F1: CostDistribution,
                    support_cap: int = DEFAULT_SUPPORT_CAP) -> float:
    """P(sum of n draws from F1 <= total_cost), plus any pruned mass (an upper bound)."""
    if n == 1:
        return min(1.0, max(0.0, F1.cdf(total_cost)))
    Fn = _cached_power(F1, n, support_cap)
    return min(1.0, max(0.0, Fn.cdf(total_cost) + Fn.pruned))


def _log_poisson_term(m: int, x: float) -> float:
    return -x + m * math.log(x) - math.lgamma(m + 1)


def log_pvalue_gamma(mean_cost: float, n: int, k: int) -> float:
    """log of P(Gamma(shape=n, rate=k*n) <= mean_cost), accumulated in log space."""
    if n < 1 or k < 1:
        raise ValueError("n and k must be >= 1")
    if mean_cost < 0:
        raise ValueError("mean cost must be >= 0")
    x = k * n * mean_cost
    if x == 0:
        return -math.inf
    if x < n:
        # lower tail directly: sum_{m >= n} e^{-x} x^m / m!, terms shrink by x/(m+1)
        rel, term, m = 1.0, 1.0, n
        while True:
            term *= x / (m + 1)
            rel += term
            m += 1
            if term < 1e-17 * rel:
                break
        return _log_poisson_term(n, x) + math.log(rel)
    # upper region: 1 - sum_{m < n}, walking down from the largest term m = n-1
    rel, term = 1.0, 1.0
    for m in range(n - 1, 0, -1):
        term *= m / x
        rel += term
        if term < 1e-17 * rel:
            break
    q = math.exp(_log_poisson_term(n - 1, x) + math.log(rel))
    return math.log1p(-min(q, 1.0)) if q < 1.0 else -math.inf


def pvalue_gamma(mean_cost: float, n: int, k: int) -> float:
    """1 - exp(-k n a) * sum_{m<n} (k n a)^m / m!  for mean cost a over n positions."""
    return math.exp(log_pvalue_gamma(mean_cost, n, k))


@dataclass
class DetectionReport:
    per_position: list[tuple[int, float]]
    total_cost: float
    mean_cost: float
    p_value: float
    n: int
    k: int
    scheme: str
    key_module: str = ""
    method: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_position"] = [[int(i), float(c)] for i, c in self.per_position]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def pvalue_for(total_cost: float, n: int, k: int, null: CostDistribution) -> tuple[float, str]:
    """p-value for a total cost over n positions, with the engine used."""
    if n == 0:
        return 1.0, "none"
    if null.is_continuous:
        # Exp(rate) costs: scale to Exp(1) and use the Gamma closed form on the mean
        return pvalue_gamma(null.rate * total_cost / n, n, k), "gamma"
    return convolve_pvalue(total_cost, n, min_of_k_cdf(null, k)), "convolution"


def detect(tokens: Sequence[int], key_module, mark_module, prefix: Sequence[int] = ()) -> DetectionReport:
    """Score every token of ``tokens`` against the k candidate keys of its preceding window.

    ``prefix`` is unscored context (e.g. the prompt). The window length comes
    from the key module's embedder or hashing window.
    """
    tokens = [int(t) for t in tokens]
    cand = key_module.candidate_keys(tokens, prefix)
    per_position = []
    for tok, keys in zip(tokens, cand):
        costs = [mark_module.cost(key, tok) for key in keys]
        best = int(np.argmin(costs))
        per_position.append((best + 1, float(costs[best])))
    n = len(tokens)
    total = float(math.fsum(c for _, c in per_position))
    mean = total / n if n else 0.0
    p, method = pvalue_for(total, n, key_module.k, mark_module.null_dist())
    return DetectionReport(per_position=per_position, total_cost=total, mean_cost=mean, p_value=p,
                           n=n, k=key_module.k, scheme=mark_module.name,
                           key_module=getattr(key_module, "name", ""), method=method)
