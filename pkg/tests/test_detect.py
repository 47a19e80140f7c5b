import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special

from semkey.detect import (CostDistribution, DetectionReport, SupportTooLargeError, binomial_complement,
                           convolve_power, convolve_pvalue, detect, discretize, log_pvalue_gamma,
                           min_of_k_cdf, pvalue_for, pvalue_gamma)
from semkey.harness import generate, sample_prompt
from semkey.keymod import make_key_module
from semkey.markmod import make_mark_module

from conftest import TEST_SALT


def gamma_oracle(a, n, k):
    # regularized lower incomplete gamma P(n, k n a) = 1 - e^{-x} sum_{m<n} x^m / m!
    return float(special.gammainc(n, k * n * a))


# closed form

def test_pvalue_gamma_examples():
    assert pvalue_gamma(0.0, 5, 2) == 0.0
    assert pvalue_gamma(math.log(2), 1, 1) == pytest.approx(0.5, abs=1e-15)


@settings(max_examples=300, deadline=None)
@given(st.floats(0.0, 5.0), st.integers(1, 2000), st.integers(1, 8))
def test_pvalue_gamma_matches_incomplete_gamma(a, n, k):
    p = pvalue_gamma(a, n, k)
    ref = gamma_oracle(a, n, k)
    assert 0.0 <= p <= 1.0
    assert p == pytest.approx(ref, rel=1e-9, abs=1e-14)


def test_pvalue_gamma_large_n_no_overflow():
    for n in (1000, 10_000):
        for a in (0.1, 0.24, 0.25, 0.26, 1.0):
            p = pvalue_gamma(a, n, 4)
            assert 0.0 <= p <= 1.0
            assert p == pytest.approx(gamma_oracle(a, n, 4), rel=1e-8, abs=1e-300)
    assert log_pvalue_gamma(0.01, 10_000, 4) < -10_000


def test_pvalue_gamma_monte_carlo():
    rng = np.random.default_rng(0)
    n, k = 20, 4
    means = rng.exponential(size=(200_000, n, k)).min(axis=2).mean(axis=1)
    for a in np.quantile(means, [0.01, 0.1, 0.5, 0.9]):
        assert abs(pvalue_gamma(a, n, k) - np.mean(means <= a)) < 0.005


def test_pvalue_gamma_monotone():
    ps = [pvalue_gamma(a, 30, 4) for a in np.linspace(0, 1, 50)]
    assert all(x <= y for x, y in zip(ps, ps[1:]))
    # below the null mean 1/k, more positions make the same mean more significant
    qs = [pvalue_gamma(0.15, n, 4) for n in range(1, 80)]
    assert all(x >= y for x, y in zip(qs, qs[1:]))


def test_pvalue_gamma_rejects_bad_input():
    with pytest.raises(ValueError):
        pvalue_gamma(-0.1, 3, 1)
    with pytest.raises(ValueError):
        pvalue_gamma(0.1, 0, 1)


# distributions

def test_cost_distribution_validation():
    with pytest.raises(ValueError):
        CostDistribution(np.array([1.0, 0.0]), np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        CostDistribution(np.array([0.0, 1.0]), np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        CostDistribution.exponential(0.0)
    F = CostDistribution(np.array([0.0, 1.0]), np.array([0.5, 0.5]))
    assert F.cdf(-1) == 0 and F.cdf(0) == 0.5 and F.cdf(0.5) == 0.5 and F.cdf(1) == 1.0


def test_min_of_k_examples():
    F = CostDistribution(np.array([0.0, 1.0]), np.array([0.5, 0.5]))
    assert min_of_k_cdf(F, 2).cdf(0) == pytest.approx(0.75)
    assert np.array_equal(min_of_k_cdf(F, 1).probs, F.probs)
    with pytest.raises(ValueError):
        min_of_k_cdf(CostDistribution.exponential(), 2)


@settings(max_examples=100)
@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=10), st.integers(1, 6))
def test_min_of_k_dominates(weights, k):
    p = np.array(weights) / sum(weights)
    F = CostDistribution(np.arange(len(p), dtype=float), p)
    G = min_of_k_cdf(F, k)
    assert np.all(G.cdf_values() >= F.cdf_values() - 1e-12)
    assert np.allclose(G.cdf_values(), 1 - (1 - np.minimum(F.cdf_values(), 1)) ** k)


def test_discretize_mass_and_cdf_accuracy():
    D = discretize(1.0, 10_000, 30.0)
    assert D.probs.sum() == pytest.approx(1.0, abs=1e-12)
    ys = np.linspace(0, 29.9, 3001)
    dev = max(abs(D.cdf(y) - (1 - math.exp(-y))) for y in ys)
    assert dev < 1e-3
    with pytest.raises(ValueError):
        discretize(1.0, 5, 30.0)


def test_discretize_refinement_reduces_error():
    a, n, k = 0.3, 10, 2
    ref = pvalue_gamma(a, n, k)
    errs = [abs(convolve_pvalue(a * n, n, min_of_k_cdf(discretize(1.0, bins, 30.0), k)) - ref)
            for bins in (10, 100, 1000, 10_000)]
    assert all(x > y for x, y in zip(errs, errs[1:]))


# convolution engine

def test_convolve_examples():
    F = CostDistribution(np.array([0.0, 1.0]), np.array([0.5, 0.5]))
    assert convolve_pvalue(1.0, 2, F) == pytest.approx(0.75)
    assert convolve_pvalue(0.0, 1, F) == F.cdf(0.0)


def naive_power(p, n):
    out = p
    for _ in range(n - 1):
        out = np.convolve(out, p)
    return out


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=6).filter(lambda w: sum(w) > 0.1), st.integers(1, 25))
def test_binary_powering_matches_sequential(weights, n):
    p = np.array(weights) / sum(weights)
    F = CostDistribution(np.arange(len(p), dtype=float), p)
    G = convolve_power(F, n, prune_below=0.0)
    ref = naive_power(p, n)
    dense = np.zeros(ref.size)
    dense[np.rint(G.support).astype(int)] = G.probs
    assert np.allclose(dense, ref, atol=1e-12)


def brute_force_pvalue(F1, n, total):
    acc = 0.0
    for combo in itertools.product(range(len(F1.support)), repeat=n):
        if sum(F1.support[list(combo)]) <= total + 1e-9:
            acc += float(np.prod(F1.probs[list(combo)]))
    return acc


@pytest.mark.parametrize("n", range(1, 7))
def test_tournament_convolution_exact(n):
    F1 = min_of_k_cdf(binomial_complement(2), 2)
    for total in range(0, 2 * n + 1):
        assert convolve_pvalue(float(total), n, F1) == pytest.approx(brute_force_pvalue(F1, n, total), abs=1e-12)


def test_tournament_convolution_monte_carlo():
    rng = np.random.default_rng(5)
    m, k, n = 3, 4, 10
    sums = (m - rng.binomial(1, 0.5, size=(1_000_000, n, k, m)).sum(axis=3)).min(axis=2).sum(axis=1)
    F1 = min_of_k_cdf(binomial_complement(m), k)
    for total in range(0, 12):
        assert abs(convolve_pvalue(float(total), n, F1) - np.mean(sums <= total)) < 1e-3


def test_engine_agreement_random_queries():
    rng = np.random.default_rng(11)
    D = discretize(1.0, 10_000, 30.0)
    for _ in range(100):
        n = int(rng.integers(1, 51))
        k = int(rng.integers(1, 9))
        a = float(rng.uniform(0, 2.0 / k))
        assert abs(convolve_pvalue(a * n, n, min_of_k_cdf(D, k)) - pvalue_gamma(a, n, k)) < 1e-3


def test_pruning_tracked_and_conservative():
    F = min_of_k_cdf(discretize(1.0, 1000, 30.0), 4)
    G = convolve_power(F, 50)
    assert G.pruned >= 0
    assert G.probs.sum() + G.pruned == pytest.approx(1.0, abs=1e-9)
    p = convolve_pvalue(5.0, 50, F)
    assert p >= G.cdf(5.0)


def test_support_cap():
    F = discretize(1.0, 10_000, 30.0)
    with pytest.raises(SupportTooLargeError):
        convolve_power(F, 1000, support_cap=1_000_000)


def test_non_lattice_support_generic_path():
    F = CostDistribution(np.array([0.0, 1.0, math.pi]), np.array([0.2, 0.5, 0.3]))
    for total in (0.0, 1.0, 2.0, math.pi, 4.2, 2 * math.pi):
        assert convolve_pvalue(total, 2, F) == pytest.approx(brute_force_pvalue(F, 2, total), abs=1e-12)


def test_convolve_pvalue_monotone_in_total():
    F1 = min_of_k_cdf(binomial_complement(3), 4)
    ps = [convolve_pvalue(t, 20, F1) for t in np.arange(0, 61, 0.5)]
    assert all(x <= y for x, y in zip(ps, ps[1:]))


# detection

def test_fixed_key_k1_costs_equal_direct_cost(lm, rng):
    km = make_key_module("fixed", TEST_SALT, k=1)
    mm = make_mark_module("expmin")
    prompt = [1, 2, 3]
    toks = generate(lm, km, mm, prompt, 30, rng)[3:]
    rep = detect(toks, km, mm, prefix=prompt)
    key = km.key([], 1)
    assert [c for _, c in rep.per_position] == [mm.cost(key, t) for t in toks]
    assert all(i == 1 for i, _ in rep.per_position)


@pytest.mark.parametrize("scheme", ["expmin", "tournament"])
def test_report_invariants(lm, rng, simkey_module, scheme):
    mm = make_mark_module(scheme)
    prompt = [4, 5, 6]
    toks = generate(lm, simkey_module, mm, prompt, 40, rng)[3:]
    rep = detect(toks, simkey_module, mm, prefix=prompt)
    cands = simkey_module.candidate_keys(toks, prompt)
    for (idx, c), keys, t in zip(rep.per_position, cands, toks):
        costs = [mm.cost(k, t) for k in keys]
        assert c == min(costs)
        assert costs[idx - 1] == c
    assert rep.total_cost == pytest.approx(sum(c for _, c in rep.per_position), abs=1e-9)
    assert 0.0 <= rep.p_value <= 1.0
    d = json.loads(rep.to_json())
    for f in ("p_value", "total_cost", "mean_cost", "n", "k", "scheme", "per_position"):
        assert f in d
    assert d["method"] == ("gamma" if scheme == "expmin" else "convolution")


def test_pvalue_for_dispatch():
    assert pvalue_for(3.0, 0, 4, binomial_complement(3)) == (1.0, "none")
    p, method = pvalue_for(2.0, 4, 2, CostDistribution.exponential(2.0))
    assert method == "gamma"
    assert p == pytest.approx(pvalue_gamma(1.0, 4, 2))


def test_watermarked_text_detected(lm, simkey_module):
    mm = make_mark_module("expmin")
    ps = []
    for i in range(20):
        r = np.random.default_rng([7, i])
        prompt = sample_prompt_fixed(r)
        toks = generate(lm, simkey_module, mm, prompt, 64, r)[3:]
        ps.append(detect(toks, simkey_module, mm, prefix=prompt).p_value)
    assert np.mean(np.array(ps) < 1e-3) >= 0.5


def sample_prompt_fixed(r):
    return [int(x) for x in r.integers(0, 300, size=3)]


@pytest.mark.parametrize("kind", ["simkey", "standard_hash"])
def test_null_pvalues_mean_near_half(lm, vocab, embedder, kind):
    km = make_key_module(kind, TEST_SALT, embedder, k=4 if kind == "simkey" else 1)
    mm = make_mark_module("expmin")
    ps = []
    for i in range(1000):
        r = np.random.default_rng([99, i])
        prompt = sample_prompt(vocab, r)
        toks = generate(lm, None, None, prompt, 64, r)[3:]
        ps.append(detect(toks, km, mm, prefix=prompt).p_value)
    assert 0.45 <= np.mean(ps) <= 0.55
