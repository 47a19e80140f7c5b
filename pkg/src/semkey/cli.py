"""Command-line entry point: ``semkey {generate,detect,attack,bench}``.

Exit codes: 0 success, 1 usage error, 2 I/O error, 3 config validation error.
The salt comes from ``SEMKEY_SALT`` (hex) or a ``salt=`` line in ``--config``
and is never printed or logged.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .attacks import ATTACK_KINDS, AttackSpec, apply_attack
from .detect import detect
from .embed import EmbedError
from .harness import (KEY_MODULES, ConfigError, RunConfig, Workbench, emit_report, generate,
                      parse_config_text, run_experiment, sample_prompt)
from .markmod import SCHEMES
from .textmodel import detokenize, tokenize

log = logging.getLogger("semkey")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_CONFIG = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# flag dest -> RunConfig field; flags default to None so the config file can supply values
_OVERRIDES = {"scheme": "schemes", "key_module": "key_modules", "k": "k", "b": "b", "window": "window",
              "top_p": "top_p", "len": "text_len", "seed": "seed", "corpus": "corpus", "order": "order",
              "smoothing": "smoothing", "embedder": "embedder", "endpoint": "endpoint",
              "table": "table_path", "m": "m", "n_drafts": "n_drafts", "chunk_len": "chunk_len",
              "std_hash_k": "std_hash_k"}


def _module_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key=value file (may carry salt=<hex>)")
    p.add_argument("--scheme", choices=SCHEMES)
    p.add_argument("--key-module", choices=KEY_MODULES)
    p.add_argument("--k", type=int, help="number of key indices")
    p.add_argument("--b", type=int, help="SimHash bits per key")
    p.add_argument("--std-hash-k", type=int, help="key indices for the standard-hash module")
    p.add_argument("--window", type=int)
    p.add_argument("--top-p", type=float)
    p.add_argument("--m", type=int, help="tournament layers")
    p.add_argument("--n-drafts", type=int)
    p.add_argument("--chunk-len", type=int)
    p.add_argument("--corpus", type=str, help="training corpus, one document per line")
    p.add_argument("--order", type=int)
    p.add_argument("--smoothing", type=float)
    p.add_argument("--embedder", choices=("feature_hash", "table", "remote"))
    p.add_argument("--endpoint", type=str)
    p.add_argument("--table", type=str, help="precomputed embedding table")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="semkey", description="Semantic-key watermarking toolkit on a toy n-gram LM.")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="generate one watermarked text")
    _module_flags(g)
    g.add_argument("--len", type=int, help="tokens to generate")
    g.add_argument("--seed", type=int)
    g.add_argument("--prompt", type=str, help="prompt text (default: 3 random words from the seed)")
    g.add_argument("--no-watermark", action="store_true", help="sample without a watermark")
    g.add_argument("--out", type=Path, help="output JSON (default stdout)")

    d = sub.add_parser("detect", help="score a text and print a detection report")
    _module_flags(d)
    d.add_argument("--in", dest="inp", type=Path, required=True,
                   help="JSON from generate/attack, or plain text")
    d.add_argument("--prompt-words", type=int, default=0,
                   help="for plain text: leading tokens treated as an unscored prompt")
    d.add_argument("--out", type=Path)

    a = sub.add_parser("attack", help="perturb a generated text")
    _module_flags(a)
    a.add_argument("--in", dest="inp", type=Path, required=True)
    a.add_argument("--kind", choices=ATTACK_KINDS, required=True)
    grp = a.add_mutually_exclusive_group()
    grp.add_argument("--count", type=int)
    grp.add_argument("--rate", type=float)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--synonyms", type=str, help="synonym table (default: built from the embedder)")
    a.add_argument("--out", type=Path)

    bch = sub.add_parser("bench", help="run an experiment from a config file")
    bch.add_argument("--config", type=Path, required=True)
    bch.add_argument("--out-dir", type=Path, required=True)
    bch.add_argument("--format", default="json,csv", help="comma list of json,csv")
    return p


def load_config(args) -> RunConfig:
    values = {}
    if getattr(args, "config", None) is not None:
        values.update(parse_config_text(Path(args.config).read_text(encoding="utf-8")))
    for dest, fieldname in _OVERRIDES.items():
        v = getattr(args, dest, None)
        if v is not None:
            values[fieldname] = v
    if getattr(args, "synonyms", None):
        values["synonyms"] = args.synonyms
    if args.command != "bench":
        # single-text commands default to one scheme and one key module
        values.setdefault("key_modules", "simkey")
        values.setdefault("attack", "none")
    cfg = RunConfig.from_mapping(values)
    if args.command != "bench" and (len(cfg.schemes) != 1 or len(cfg.key_modules) != 1):
        raise ConfigError("generate/detect/attack take a single scheme and key module")
    return cfg


def _single(cfg: RunConfig) -> tuple[str, str]:
    return cfg.schemes[0], cfg.key_modules[0]


def _write(obj: dict, out: Path | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")


def _read_text_input(path: Path, bench: Workbench, prompt_words: int) -> tuple[list[int], list[int], dict]:
    raw = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError:
        doc = None
    if isinstance(doc, dict) and "token_ids" in doc:
        return [int(t) for t in doc.get("prompt_ids", [])], [int(t) for t in doc["token_ids"]], doc
    ids = tokenize(raw, bench.vocab)
    if prompt_words > len(ids):
        raise UsageError("--prompt-words exceeds the text length")
    return ids[:prompt_words], ids[prompt_words:], {}


def cmd_generate(args) -> int:
    cfg = load_config(args)
    bench = Workbench.build(cfg)
    scheme, kind = _single(cfg)
    rng = np.random.default_rng(cfg.seed)
    prompt = tokenize(args.prompt, bench.vocab) if args.prompt else sample_prompt(bench.vocab, rng)
    km = None if args.no_watermark else bench.key_module(kind)
    mm = None if args.no_watermark else bench.mark_module(scheme)
    full = generate(bench.lm, km, mm, prompt, cfg.text_len, rng, cfg.top_p)
    gen = full[len(prompt):]
    _write({"prompt_ids": prompt, "token_ids": gen, "text": detokenize(full, bench.vocab),
            "scheme": None if args.no_watermark else scheme,
            "key_module": None if args.no_watermark else kind,
            "params": {"k": cfg.k, "b": cfg.b, "window": cfg.window, "top_p": cfg.top_p, "len": cfg.text_len,
                       "seed": cfg.seed}}, args.out)
    return EXIT_OK


def cmd_detect(args) -> int:
    cfg = load_config(args)
    bench = Workbench.build(cfg)
    scheme, kind = _single(cfg)
    prompt, tokens, _ = _read_text_input(args.inp, bench, args.prompt_words)
    if not tokens:
        raise UsageError("no tokens to score")
    rep = detect(tokens, bench.key_module(kind), bench.mark_module(scheme), prefix=prompt)
    _write(rep.to_dict(), args.out)
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = load_config(args)
    bench = Workbench.build(cfg)
    prompt, tokens, doc = _read_text_input(args.inp, bench, 0)
    try:
        spec = AttackSpec(kind=args.kind, count=args.count,
                          rate=args.rate if args.rate is not None or args.count is not None else 0.3,
                          seed=args.seed)
    except ValueError as e:
        raise UsageError(str(e)) from e
    if spec.count is not None and spec.count > len(tokens):
        raise UsageError("--count exceeds the text length")
    attacked = apply_attack(tokens, spec, vocab_size=bench.vocab.size, lm=bench.lm, table=bench.table,
                            prefix=prompt)
    out = dict(doc)
    out.update({"prompt_ids": prompt, "token_ids": attacked,
                "text": detokenize(prompt + attacked, bench.vocab),
                "attack": {"kind": spec.kind, "count": spec.count, "rate": spec.rate, "seed": spec.seed}})
    _write(out, args.out)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = load_config(args)
    formats = [f.strip() for f in args.format.split(",") if f.strip()]
    if not formats or any(f not in ("json", "csv") for f in formats):
        raise UsageError("--format must be a comma list of json,csv")
    report = run_experiment(cfg)
    for path in emit_report(report, args.out_dir, formats):
        log.info("wrote %s", path)
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "detect": cmd_detect, "attack": cmd_attack, "bench": cmd_bench}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"semkey: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"semkey: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, EmbedError) as e:
        print(f"semkey: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        # remaining validation failures come from module parameters
        print(f"semkey: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
