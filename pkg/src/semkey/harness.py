"""Generation loop, experiment orchestration, metrics and report emission."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attacks import AttackSpec, apply_attack, build_synonym_table, load_synonym_table
from .corpus import CORPUS_PATH, LEXICON_PATH
from .detect import detect
from .embed import EmbedderConfig, make_embedder
from .keymod import SALT_ENV, make_key_module
from .markmod import SCHEMES, WaterMax, make_mark_module, watermax_mark
from .textmodel import (Vocabulary, next_dist, perplexity, read_corpus, sample, tokenize,
                        train_ngram)

log = logging.getLogger(__name__)

KEY_MODULES = ("simkey", "standard_hash", "fixed")
CSV_COLUMNS = ("text_id", "condition", "scheme", "key_module", "attack", "n_tokens", "p_value",
               "mean_cost", "perplexity")


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


def generate(lm, key_module, mark_module, prompt, length: int, rng: np.random.Generator,
             top_p: float = 0.9) -> list[int]:
    """Append ``length`` tokens to ``prompt``.

    Each step embeds/hashes the preceding window, draws a key index uniformly
    from 1..k, derives the key and lets the mark module pick the token.
    ``mark_module=None`` samples without a watermark.
    """
    out = [int(t) for t in prompt]
    end = len(out) + length
    if mark_module is None:
        while len(out) < end:
            out.append(sample(next_dist(lm, out, top_p), rng))
        return out
    if isinstance(mark_module, WaterMax):
        params = mark_module.params
        while len(out) < end:
            L = min(params.chunk_len, end - len(out))
            idxs = rng.integers(1, key_module.k + 1, size=L)
            chunk = watermax_mark(lambda prefix, t: key_module.key(prefix, int(idxs[t])),
                                  lm, out, params, rng, top_p=top_p, length=L)
            out += chunk
        return out
    while len(out) < end:
        idx = int(rng.integers(1, key_module.k + 1))
        key = key_module.key(out, idx)
        out.append(mark_module.mark(key, next_dist(lm, out, top_p)))
    return out


def sample_prompt(vocab, rng: np.random.Generator, n_words: int = 3) -> list[int]:
    """Three uniform in-vocabulary tokens (the OOV sentinel is never drawn)."""
    return [int(t) for t in rng.integers(0, vocab.size - 1, size=n_words)]


def tpr_at_fpr(p_wm: Sequence[float], p_null: Sequence[float], fpr: float = 0.01) -> float:
    """Fraction of ``p_wm`` at or below the largest threshold whose null rejection rate is <= fpr."""
    if not len(p_wm) or not len(p_null):
        raise ValueError("need nonempty p-value lists")
    if not 0 < fpr < 1:
        raise ValueError("fpr must be in (0, 1)")
    null = np.sort(np.asarray(p_null, dtype=np.float64))
    allowed = math.floor(fpr * len(null) + 1e-9)
    if allowed >= len(null):
        return 1.0
    # any threshold strictly below the (allowed+1)-th smallest null p-value qualifies
    cut = null[allowed]
    return float(np.mean(np.asarray(p_wm, dtype=np.float64) < cut))


def _split(value, cast=str) -> tuple:
    if isinstance(value, (list, tuple)):
        return tuple(cast(v) for v in value)
    return tuple(cast(v.strip()) for v in str(value).split(",") if v.strip())


@dataclass
class RunConfig:
    schemes: tuple[str, ...] = ("expmin",)
    key_modules: tuple[str, ...] = ("simkey", "standard_hash")
    k: int = 4
    b: int = 4
    std_hash_k: int = 1
    window: int = 8
    top_p: float = 0.9
    n_texts: int = 80
    n_null: int = 120
    text_len: int = 64
    attack: str = "synonym_paraphrase"
    attack_rate: float = 0.3
    attack_count: int = -1
    seed: int = 0
    corpus: str = ""
    lexicon: str = ""
    synonyms: str = ""
    order: int = 3
    smoothing: float = 0.1
    salt: str = field(default="", repr=False)
    embedder: str = "feature_hash"
    embed_dim: int = 384
    table_path: str = ""
    endpoint: str = ""
    timeout: float = 10.0
    m: int = 3
    n_drafts: int = 8
    chunk_len: int = 16
    fpr: float = 0.01

    def __post_init__(self):
        self.schemes = _split(self.schemes)
        self.key_modules = _split(self.key_modules)
        self.validate()

    def validate(self) -> None:
        bad = [s for s in self.schemes if s not in SCHEMES]
        if bad or not self.schemes:
            raise ConfigError(f"schemes must be drawn from {SCHEMES}, got {self.schemes}")
        bad = [s for s in self.key_modules if s not in KEY_MODULES]
        if bad or not self.key_modules:
            raise ConfigError(f"key_modules must be drawn from {KEY_MODULES}, got {self.key_modules}")
        for name in ("k", "b", "std_hash_k", "window", "text_len", "order", "m", "n_drafts", "chunk_len",
                     "embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("n_texts", "n_null"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ConfigError("top_p must be in (0, 1]")
        if self.smoothing <= 0:
            raise ConfigError("smoothing must be > 0")
        if not 0 <= self.attack_rate <= 1:
            raise ConfigError("attack_rate must be in [0, 1]")
        if not 0 < self.fpr < 1:
            raise ConfigError("fpr must be in (0, 1)")
        try:
            self.attack_spec()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.salt:
            try:
                bytes.fromhex(self.salt)
            except ValueError as e:
                raise ConfigError("salt must be hex-encoded") from e

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            default = fields[key].default
            try:
                if isinstance(default, tuple) or not isinstance(raw, str):
                    kwargs[key] = raw
                elif isinstance(default, bool):
                    kwargs[key] = raw.lower() in ("1", "true", "yes")
                elif isinstance(default, int):
                    kwargs[key] = int(raw)
                elif isinstance(default, float):
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = raw
            except ValueError as e:
                raise ConfigError(f"bad value for {key}: {raw!r}") from e
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_mapping(parse_config_text(Path(path).read_text(encoding="utf-8")))

    def salt_bytes(self, env=os.environ) -> bytes:
        if self.salt:
            return bytes.fromhex(self.salt)
        raw = env.get(SALT_ENV)
        if not raw:
            raise ConfigError(f"no salt: set {SALT_ENV} (hex) or 'salt' in the config file")
        try:
            return bytes.fromhex(raw)
        except ValueError as e:
            raise ConfigError(f"{SALT_ENV} must be hex-encoded") from e

    def attack_spec(self, seed: int | None = None) -> AttackSpec:
        count = self.attack_count if self.attack_count >= 0 else None
        rate = None if count is not None else self.attack_rate
        return AttackSpec(kind=self.attack, count=count, rate=rate, seed=self.seed if seed is None else seed)

    def embedder_config(self) -> EmbedderConfig:
        return EmbedderConfig(kind=self.embedder, dim=self.embed_dim, window=self.window,
                              table_path=self.table_path or None,
                              lexicon_path=self.lexicon or str(LEXICON_PATH),
                              endpoint=self.endpoint or None, timeout=self.timeout)

    def echo(self) -> dict:
        """Config as a plain dict with the salt redacted."""
        d = dataclasses.asdict(self)
        d["schemes"] = list(self.schemes)
        d["key_modules"] = list(self.key_modules)
        d["salt"] = "<redacted>" if self.salt else ""
        return d


def parse_config_text(text: str) -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment line."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value")
        values[key.strip()] = value.strip()
    return values


@dataclass
class Workbench:
    """Everything a run shares: vocabulary, LM, embedder, synonym table, salt."""

    config: RunConfig
    vocab: Vocabulary
    lm: object
    embedder: object
    table: dict
    salt: bytes

    @classmethod
    def build(cls, config: RunConfig) -> "Workbench":
        docs = read_corpus(config.corpus or CORPUS_PATH)
        vocab = Vocabulary.from_corpus(docs)
        stream = [i for doc in docs for i in tokenize(doc, vocab)]
        lm = train_ngram(stream, order=config.order, smoothing=config.smoothing, vocab_size=vocab.size)
        embedder = make_embedder(config.embedder_config(), vocab)
        if config.synonyms:
            table = load_synonym_table(config.synonyms)
        else:
            table = build_synonym_table(vocab, embedder)
        return cls(config, vocab, lm, embedder, table, config.salt_bytes())

    def key_module(self, kind: str):
        c = self.config
        k = c.std_hash_k if kind == "standard_hash" else c.k
        return make_key_module(kind, self.salt, self.embedder, k=k, b=c.b, window=c.window)

    def mark_module(self, scheme: str):
        c = self.config
        return make_mark_module(scheme, m=c.m, n_drafts=c.n_drafts, chunk_len=c.chunk_len)


def text_rng(seed: int, stream: int, text_id: int) -> np.random.Generator:
    """Independent generator per (run seed, stream, text); partial reruns reproduce exactly."""
    return np.random.default_rng([seed, stream, text_id])


def derived_seed(seed: int, stream: int, text_id: int) -> int:
    return int(np.random.SeedSequence([seed, stream, text_id]).generate_state(1)[0])


_PROMPT, _GEN, _NULL_PROMPT, _NULL_GEN, _ATTACK = range(5)


@dataclass
class ExperimentReport:
    rows: list[dict]
    metrics: list[dict]
    config: dict
    wall_clock_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {"config": self.config, "metrics": self.metrics, "rows": self.rows,
                "wall_clock_seconds": self.wall_clock_seconds}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        return cls(rows=d["rows"], metrics=d["metrics"], config=d["config"],
                   wall_clock_seconds=d.get("wall_clock_seconds", 0.0))


def _safe_perplexity(lm, tokens) -> float | None:
    try:
        return perplexity(lm, tokens)
    except ValueError:
        return None


def _median(xs) -> float | None:
    return float(np.median(xs)) if len(xs) else None


def run_experiment(config: RunConfig, bench: Workbench | None = None) -> ExperimentReport:
    """Generate watermarked and null texts, attack, detect, and summarize.

    Prompts, generation streams and attack seeds depend only on (seed, text_id),
    so every scheme x key-module pair sees the same prompts and the same null texts.
    """
    t0 = time.perf_counter()
    bench = bench or Workbench.build(config)
    c = config
    lm, vocab = bench.lm, bench.vocab
    attack_label = c.attack if c.attack != "none" else "none"

    nulls = []
    for tid in range(c.n_null):
        prompt = sample_prompt(vocab, text_rng(c.seed, _NULL_PROMPT, tid))
        full = generate(lm, None, None, prompt, c.text_len, text_rng(c.seed, _NULL_GEN, tid), c.top_p)
        nulls.append((prompt, full[len(prompt):], _safe_perplexity(lm, full)))

    rows, metrics = [], []
    for scheme in c.schemes:
        mark = bench.mark_module(scheme)
        for kind in c.key_modules:
            km = bench.key_module(kind)
            p_wm, p_att, p_null, ppl = [], [], [], []
            for tid in range(c.n_texts):
                prompt = sample_prompt(vocab, text_rng(c.seed, _PROMPT, tid))
                full = generate(lm, km, mark, prompt, c.text_len, text_rng(c.seed, _GEN, tid), c.top_p)
                gen = full[len(prompt):]
                ppx = _safe_perplexity(lm, full)
                rep = detect(gen, km, mark, prefix=prompt)
                rows.append(_row(tid, "watermarked", scheme, kind, "none", rep, ppx))
                p_wm.append(rep.p_value)
                if ppx is not None:
                    ppl.append(ppx)
                if c.attack != "none":
                    spec = c.attack_spec(seed=derived_seed(c.seed, _ATTACK, tid))
                    att = apply_attack(gen, spec, vocab_size=vocab.size, lm=lm, table=bench.table,
                                       prefix=prompt)
                    arep = detect(att, km, mark, prefix=prompt)
                    rows.append(_row(tid, "attacked", scheme, kind, attack_label, arep,
                                     _safe_perplexity(lm, prompt + att)))
                    p_att.append(arep.p_value)
            for tid, (prompt, gen, ppx) in enumerate(nulls):
                rep = detect(gen, km, mark, prefix=prompt)
                rows.append(_row(tid, "null", scheme, kind, "none", rep, ppx))
                p_null.append(rep.p_value)
            metrics.append({
                "scheme": scheme, "key_module": kind, "attack": attack_label, "fpr": c.fpr,
                "tpr_watermarked": tpr_at_fpr(p_wm, p_null, c.fpr) if p_wm and p_null else None,
                "tpr_attacked": tpr_at_fpr(p_att, p_null, c.fpr) if p_att and p_null else None,
                "median_p_watermarked": _median(p_wm),
                "median_p_attacked": _median(p_att),
                "median_p_null": _median(p_null),
                "mean_perplexity_watermarked": float(np.mean(ppl)) if ppl else None,
                "mean_perplexity_null": (float(np.mean([x[2] for x in nulls if x[2] is not None]))
                                         if nulls else None),
            })
    return ExperimentReport(rows=rows, metrics=metrics, config=c.echo(),
                            wall_clock_seconds=time.perf_counter() - t0)


def _row(tid, condition, scheme, kind, attack, rep, ppx) -> dict:
    return {"text_id": tid, "condition": condition, "scheme": scheme, "key_module": kind,
            "attack": attack, "n_tokens": rep.n, "p_value": rep.p_value, "mean_cost": rep.mean_cost,
            "perplexity": ppx}


def emit_report(report: ExperimentReport, out_dir, formats: Sequence[str] = ("json", "csv")) -> list[Path]:
    """Write ``report.json`` and/or ``report.csv`` (one row per text and condition) into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        if fmt == "json":
            path = out_dir / "report.json"
            path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        elif fmt == "csv":
            path = out_dir / "report.csv"
            with open(path, "w", newline="", encoding="utf-8") as f:
                w = csv.DictWriter(f, fieldnames=CSV_COLUMNS, lineterminator="\n")
                w.writeheader()
                for r in report.rows:
                    w.writerow({k: ("" if r[k] is None else (repr(r[k]) if isinstance(r[k], float) else r[k]))
                                for k in CSV_COLUMNS})
        else:
            raise ValueError(f"unknown report format {fmt!r}")
        written.append(path)
    return written
