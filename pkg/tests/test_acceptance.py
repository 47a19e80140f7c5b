"""Acceptance criteria, each at its stated tolerance and sample size.

Every check appends one PASS/FAIL line to the summary printed at the end of
the pytest run (and prints it inline when run with ``-s``).
"""

import json
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from semkey.detect import binomial_complement, convolve_pvalue, detect, discretize, min_of_k_cdf, pvalue_gamma
from semkey.harness import RunConfig, Workbench, generate, run_experiment, sample_prompt
from semkey.keymod import SimKeyParams, key_from_bits, projections
from semkey.markmod import expmin_mark, make_mark_module
from semkey._prf import canonical_hash

from conftest import ACCEPTANCE_LOG, TEST_SALT
from test_detect import brute_force_pvalue

SALT_HEX = TEST_SALT.hex()


def record(name, ok, detail):
    ACCEPTANCE_LOG.append((name, bool(ok), detail))
    print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    assert ok, detail


def pair_at_angle(rng, d, theta):
    v = rng.standard_normal(d)
    v /= np.linalg.norm(v)
    w = rng.standard_normal(d)
    w -= (w @ v) * v
    w /= np.linalg.norm(w)
    t = math.radians(theta)
    return v, math.cos(t) * v + math.sin(t) * w


def test_criterion_1_same_key_rate():
    t0 = time.perf_counter()
    d, n_salts = 384, 10_000
    thetas = (0, 30, 60, 90, 120)
    rng = np.random.default_rng(1)
    pairs = [pair_at_angle(rng, d, th) for th in thetas]
    V = np.stack([x for p in pairs for x in p])  # rows: v0, v0', v1, v1', ...
    same = {(th, b): 0 for th in thetas for b in (1, 4)}
    for s in range(n_salts):
        salt = canonical_hash("same-key-salts", s)
        bits = projections(SimKeyParams(salt=salt, b=4, d=d), 1) @ V.T >= 0.0  # (4, 10)
        for b in (1, 4):
            for i, th in enumerate(thetas):
                ka = key_from_bits(bits[:b, 2 * i], 1, salt)
                kb = key_from_bits(bits[:b, 2 * i + 1], 1, salt)
                same[(th, b)] += ka == kb
    elapsed = time.perf_counter() - t0
    worst, parts = 0.0, []
    for (th, b), c in same.items():
        rate, expect = c / n_salts, (1 - th / 180) ** b
        worst = max(worst, abs(rate - expect))
        parts.append(f"{th}deg/b{b} {rate:.4f} vs {expect:.4f}")
    record("criterion 1 (same-key rate vs (1-theta/180)^b)", worst <= 0.02 and elapsed < 60,
           f"max |dev| {worst:.4f} <= 0.02, {elapsed:.1f}s < 60s; " + "; ".join(parts))


def test_criterion_2_expmin_distortion_free():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    n = 100_000
    results = []
    for V in (10, 100):
        for j in range(5):
            p = rng.dirichlet(np.ones(V))
            counts = np.zeros(V)
            for i in range(n):
                counts[expmin_mark(canonical_hash("distortion", V, j, i), p)] += 1
            tv = 0.5 * np.abs(counts / n - p).sum()
            exact = 0.5 * np.abs(rng.multinomial(n, p) / n - p).sum()
            results.append((V, tv, exact))
    elapsed = time.perf_counter() - t0
    worst = max(tv for _, tv, _ in results)
    detail = "; ".join(f"V={V} TV {tv:.4f} (exact sampler {ex:.4f})" for V, tv, ex in results)
    record("criterion 2 (ExpMin TV < 0.01 over 1e5 fresh keys)", worst < 0.01 and elapsed < 60,
           f"max TV {worst:.4f}, {elapsed:.1f}s; {detail}")


def test_criterion_3_gamma_pvalue_monte_carlo():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst, parts = 0.0, []
    for n in (5, 20, 50):
        for k in (1, 4):
            means = np.concatenate([rng.exponential(size=(100_000, n, k)).min(axis=2).mean(axis=1)
                                    for _ in range(10)])
            means.sort()
            qs = np.quantile(means, [0.001, 0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99])
            dev = max(abs(pvalue_gamma(a, n, k) - np.searchsorted(means, a, side="right") / means.size) for a in qs)
            worst = max(worst, dev)
            parts.append(f"n={n},k={k}: {dev:.5f}")
    elapsed = time.perf_counter() - t0
    record("criterion 3 (Gamma p-value vs 1e6-sample Monte Carlo)", worst <= 0.005 and elapsed < 120,
           f"max |dev| {worst:.5f} <= 0.005, {elapsed:.1f}s; " + "; ".join(parts))


def test_criterion_4_engine_agreement():
    rng = np.random.default_rng(4)
    D = discretize(1.0, 10_000, 30.0)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 51))
        k = int(rng.integers(1, 9))
        a = float(rng.uniform(0, 2.0 / k))
        worst = max(worst, abs(convolve_pvalue(a * n, n, min_of_k_cdf(D, k)) - pvalue_gamma(a, n, k)))
    F1 = min_of_k_cdf(binomial_complement(2), 2)
    exact = max(abs(convolve_pvalue(float(t), n, F1) - brute_force_pvalue(F1, n, t))
                for n in range(1, 7) for t in range(0, 2 * n + 1))
    record("criterion 4 (convolution engine vs closed form and enumeration)", worst < 1e-3 and exact < 1e-12,
           f"discretized vs gamma max |dev| {worst:.2e} < 1e-3 over 100 queries; "
           f"tournament m=2,k=2,n<=6 vs enumeration max |dev| {exact:.1e}")


@pytest.fixture(scope="module")
def bench():
    return Workbench.build(RunConfig(salt=SALT_HEX))


@pytest.fixture(scope="module")
def null_texts(bench):
    t0 = time.perf_counter()
    texts = []
    for i in range(1000):
        r = np.random.default_rng([5, i])
        prompt = sample_prompt(bench.vocab, r)
        texts.append((prompt, generate(bench.lm, None, None, prompt, 64, r)[3:]))
    return texts, time.perf_counter() - t0


def _null_fpr(bench, null_texts, kinds):
    texts, gen_time = null_texts
    t0 = time.perf_counter()
    out = {}
    for scheme in ("expmin", "tournament", "watermax"):
        mm = make_mark_module(scheme)
        for kind in kinds:
            km = bench.key_module(kind) if kind != "standard_hash" else bench.key_module(kind)
            ps = np.array([detect(x, km, mm, prefix=pr).p_value for pr, x in texts])
            out[(scheme, kind)] = float(np.mean(ps <= 0.01))
    return out, gen_time + time.perf_counter() - t0


def test_criterion_5_null_calibration(bench, null_texts):
    fpr, elapsed = _null_fpr(bench, null_texts, ("simkey", "standard_hash"))
    worst = max(fpr.values())
    record("criterion 5 (null FPR <= 0.02 at p <= 0.01, SimKey and standard hash)",
           worst <= 0.02 and elapsed < 600,
           f"max FPR {worst:.3f}, {elapsed:.1f}s; " + "; ".join(f"{s}/{k} {v:.3f}" for (s, k), v in fpr.items()))


def test_criterion_5_null_calibration_fixed_key(bench, null_texts):
    fpr, elapsed = _null_fpr(bench, null_texts, ("fixed",))
    worst = max(fpr.values())
    record("criterion 5 (null FPR <= 0.02 at p <= 0.01, fixed key)", worst <= 0.02 and elapsed < 600,
           f"max FPR {worst:.3f}, {elapsed:.1f}s; " + "; ".join(f"{s}/{k} {v:.3f}" for (s, k), v in fpr.items()))


def test_criterion_6_detection_power(bench):
    km, mm = bench.key_module("simkey"), make_mark_module("expmin")
    meds = {}
    for length in (16, 32, 64, 128):
        ps = []
        for i in range(80):
            prompt = sample_prompt(bench.vocab, np.random.default_rng([6, 0, i]))
            toks = generate(bench.lm, km, mm, prompt, length, np.random.default_rng([6, 1, i]))[3:]
            ps.append(detect(toks, km, mm, prefix=prompt).p_value)
        meds[length] = float(np.median(ps))
    mono = all(meds[a] >= meds[b] for a, b in zip((16, 32, 64), (32, 64, 128)))
    record("criterion 6 (ExpMin+SimKey 64-token median p < 1e-3, monotone in length)",
           meds[64] < 1e-3 and mono,
           "medians " + ", ".join(f"{n}: {p:.3g}" for n, p in meds.items()))


def _medians(cfg):
    r = run_experiment(cfg)
    return {(m["scheme"], m["key_module"]): m for m in r.metrics}


def test_criterion_7_robustness_ordering():
    base = dict(salt=SALT_HEX, n_texts=200, n_null=0, attack_rate=0.3)
    syn = _medians(RunConfig(schemes="expmin,watermax", attack="synonym_paraphrase", **base))
    ok_syn = all(syn[(s, "simkey")]["median_p_attacked"] < syn[(s, "standard_hash")]["median_p_attacked"]
                 for s in ("expmin", "watermax"))
    unrel = _medians(RunConfig(schemes="expmin,watermax", attack="unrelated_subst", **base))
    ratios = {key: m["median_p_attacked"] / m["median_p_watermarked"] for key, m in unrel.items()}
    ok_unrel = all(ratios[("expmin", k)] >= 100 for k in ("simkey", "standard_hash"))
    detail = ("synonym rate 0.3 medians: " +
              "; ".join(f"{s} simkey {syn[(s, 'simkey')]['median_p_attacked']:.3g} vs standard_hash "
                        f"{syn[(s, 'standard_hash')]['median_p_attacked']:.3g}" for s in ("expmin", "watermax")) +
              " | unrelated 30% attacked/clean median ratio: " +
              "; ".join(f"{s}/{k} {ratios[(s, k)]:.3g}" for s, k in ratios) +
              " (asserted for expmin)")
    record("criterion 7 (SimKey more robust to paraphrase; both degrade under unrelated substitution)",
           ok_syn and ok_unrel, detail)


def _cli(args, cwd):
    env = dict(os.environ, SEMKEY_SALT=SALT_HEX)
    r = subprocess.run([sys.executable, "-m", "semkey", *map(str, args)], cwd=cwd, env=env,
                       capture_output=True)
    assert r.returncode == 0, r.stderr.decode()
    return r.stdout


def test_criterion_8_cli_determinism(tmp_path):
    cfg = tmp_path / "bench.cfg"
    cfg.write_text("schemes=expmin,tournament,watermax\nn_texts=4\nn_null=4\ntext_len=24\nattack=related_subst\n"
                   "attack_count=5\n")
    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        files = {}
        _cli(["generate", "--scheme", "watermax", "--len", 40, "--seed", 7, "--out", d / "gen.json"], d)
        _cli(["attack", "--in", d / "gen.json", "--kind", "synonym_paraphrase", "--rate", 0.3, "--seed", 2,
              "--out", d / "att.json"], d)
        files["detect.stdout"] = _cli(["detect", "--scheme", "watermax", "--in", d / "att.json"], d)
        _cli(["bench", "--config", cfg, "--out-dir", d / "bench"], d)
        for name in ("gen.json", "att.json", "bench/report.csv"):
            files[name] = (d / name).read_bytes()
        report = json.loads((d / "bench/report.json").read_text())
        report.pop("wall_clock_seconds")
        files["bench/report.json"] = json.dumps(report, sort_keys=True).encode()
        outputs.append(files)
    same = [name for name in outputs[0] if outputs[0][name] == outputs[1][name]]
    record("criterion 8 (repeated CLI invocations are byte-identical)", len(same) == len(outputs[0]),
           f"{len(same)}/{len(outputs[0])} outputs identical: {', '.join(sorted(outputs[0]))}")
