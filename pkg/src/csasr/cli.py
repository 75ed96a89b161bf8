"""Command-line entry point: ``csasr <subcommand> [--config FILE] [--key value ...]``.

Relative output paths are resolved under ``$CSASR_OUTPUT_ROOT`` when set.
Exit codes: 0 success, 1 unexpected failure, 2 configuration error,
3 data/checkpoint error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from .ablation import build_matrix, format_table, run_ablation
from .autodiff import CheckpointError
from .corpus import CorpusConfig, CorpusError, generate_corpus, global_mvn, load_corpus, save_corpus
from .metrics import MetricError
from .model import ConfigError, ModelConfig
from .training import (
    SYSTEMS,
    DivergenceError,
    ExperimentConfig,
    average_checkpoints,
    evaluate_model,
    model_from_checkpoint,
    prepare_corpus,
    train,
)
from .vocab import VocabError

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4
OUTPUT_ROOT_ENV = "CSASR_OUTPUT_ROOT"

log = logging.getLogger("csasr")


def output_path(p: str) -> Path:
    path = Path(p)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_overrides(extra: Sequence[str]) -> Dict[str, Any]:
    """``--a.b 3 --flag true`` -> {"a.b": 3, "flag": True}."""
    out: Dict[str, Any] = {}
    i = 0
    while i < len(extra):
        key = extra[i]
        if not key.startswith("--") or i + 1 >= len(extra):
            raise ConfigError(f"expected '--key value' pairs, got {' '.join(extra[i:])!r}")
        out[key[2:].replace("-", "_")] = _parse_value(extra[i + 1])
        i += 2
    return out


_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
_CORPUS_KEYS = {f.name for f in dataclasses.fields(CorpusConfig)}
_EXPERIMENT_KEYS = {f.name for f in dataclasses.fields(ExperimentConfig)}


def apply_overrides(cfg: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Set overrides on an experiment-config dict. Keys may be dotted
    (``model.d_model``) or bare; a bare key is looked up in the experiment,
    then model, then corpus fields."""
    cfg = json.loads(json.dumps(cfg))
    for key, value in overrides.items():
        if "." in key:
            section, name = key.split(".", 1)
            if section not in ("model", "corpus"):
                raise ConfigError(f"unknown config section in {key!r}")
            cfg.setdefault(section, {})[name] = value
        elif key in _EXPERIMENT_KEYS:
            cfg[key] = value
        elif key in _MODEL_KEYS:
            cfg.setdefault("model", {})[key] = value
        elif key in _CORPUS_KEYS:
            cfg.setdefault("corpus", {})[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return cfg


def _read_json(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})")


def experiment_config(args, extra) -> ExperimentConfig:
    raw = apply_overrides(_read_json(args.config), parse_overrides(extra))
    try:
        cfg = ExperimentConfig.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(str(exc))
    cfg.validate()
    return cfg


def _load_corpus_for(cfg: ExperimentConfig, corpus_dir: Optional[str]):
    if corpus_dir:
        return prepare_corpus(cfg, load_corpus(corpus_dir))
    return prepare_corpus(cfg)


# -- subcommands -------------------------------------------------------------


def cmd_gen_corpus(args, extra) -> int:
    raw = _read_json(args.config)
    raw = raw.get("corpus", raw) if "corpus" in raw else raw
    overrides = {k.split(".", 1)[-1]: v for k, v in parse_overrides(extra).items()}
    unknown = set(overrides) - _CORPUS_KEYS
    if unknown:
        raise ConfigError(f"unknown corpus keys: {sorted(unknown)}")
    raw.update(overrides)
    try:
        cfg = CorpusConfig.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(str(exc))
    try:
        cfg.validate()
    except CorpusError as exc:
        raise ConfigError(str(exc)) from exc
    corpus, _ = global_mvn(generate_corpus(cfg))
    out = save_corpus(corpus, output_path(args.out))
    sizes = {k: len(v) for k, v in corpus.splits.items()}
    print(json.dumps({"corpus": str(out), "splits": sizes, "vocab_size": len(corpus.vocab)}))
    return EXIT_OK


def cmd_train(args, extra) -> int:
    cfg = experiment_config(args, extra)
    corpus = _load_corpus_for(cfg, args.corpus)
    out = output_path(args.out)
    record, _ = train(cfg, corpus, out)
    last = record.epochs[-1]
    print(
        json.dumps(
            {
                "run_dir": str(out),
                "averaged_checkpoint": record.averaged_checkpoint,
                "final_train_loss": last.train.total,
                "final_valid_loss": last.valid.total,
                "valid_mer": record.valid_mer,
                "wall_clock": round(record.wall_clock, 1),
            }
        )
    )
    return EXIT_OK


def cmd_evaluate(args, extra) -> int:
    model, meta = model_from_checkpoint(args.checkpoint)
    exp = ExperimentConfig.from_dict(meta.get("experiment", {}))
    if args.corpus:
        corpus = prepare_corpus(exp, load_corpus(args.corpus))
    else:
        corpus = prepare_corpus(exp)
    if args.split not in corpus.splits:
        raise CorpusError(f"corpus has no split {args.split!r}")
    decode_out = output_path(args.decode_out) if args.decode_out else None
    if decode_out is not None:
        decode_out.parent.mkdir(parents=True, exist_ok=True)
    report = evaluate_model(
        model,
        corpus,
        args.split,
        beam=args.beam,
        alpha_decode=args.alpha_decode,
        max_len=args.max_len,
        nbest=args.nbest,
        limit=args.limit,
        decode_path=decode_out,
    )
    text = json.dumps(report, indent=1)
    if args.out:
        path = output_path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    print(text)
    return EXIT_OK


def cmd_average(args, extra) -> int:
    out = output_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    average_checkpoints(args.checkpoints, out)
    print(json.dumps({"averaged": str(out), "inputs": len(args.checkpoints)}))
    return EXIT_OK


def cmd_ablate(args, extra) -> int:
    cfg = experiment_config(args, extra)
    systems = [s.strip() for s in args.systems.split(",") if s.strip()]
    for s in systems:
        if s not in SYSTEMS:
            raise ConfigError(f"unknown system id {s!r}; known: {', '.join(SYSTEMS)}")
    seeds = [int(s) for s in args.seeds.split(",")]
    sweep = [float(b) for b in args.beta_sweep.split(",")] if args.beta_sweep else None
    corpus = load_corpus(args.corpus) if args.corpus else None
    out = output_path(args.out)
    table = run_ablation(build_matrix(cfg, systems, sweep), seeds, corpus, out, workers=args.workers)
    print(format_table(table), end="")
    return EXIT_OK


def cmd_report(args, extra) -> int:
    path = output_path(args.results)
    if path.is_dir():
        path = path / "ablation.json"
    try:
        table = json.loads(path.read_text())
    except FileNotFoundError:
        raise CorpusError(f"no results at {path}")
    print(format_table(table), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="csasr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="generate and normalise a synthetic corpus")
    g.add_argument("--config", help="corpus (or experiment) config JSON")
    g.add_argument("--out", default="corpus")
    g.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("train", help="train one system")
    t.add_argument("--config", help="experiment config JSON")
    t.add_argument("--corpus", help="corpus directory (generated from the config when omitted)")
    t.add_argument("--out", default="run")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="beam-search a split and score it")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus")
    e.add_argument("--split", default="test_cs")
    e.add_argument("--beam", type=int, default=10)
    e.add_argument("--alpha-decode", type=float, default=0.4)
    e.add_argument("--max-len", type=int)
    e.add_argument("--nbest", type=int, default=1)
    e.add_argument("--limit", type=int)
    e.add_argument("--out", help="write the score report here")
    e.add_argument("--decode-out", help="write per-utterance hypotheses (JSON lines)")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("average", help="parameter-wise mean of checkpoints")
    a.add_argument("--out", required=True)
    a.add_argument("checkpoints", nargs="+")
    a.set_defaults(func=cmd_average)

    b = sub.add_parser("ablate", help="multi-seed ablation table")
    b.add_argument("--config", help="base experiment config JSON")
    b.add_argument("--corpus")
    b.add_argument("--systems", default="S0,S2.1,S2.8,S3.3")
    b.add_argument("--seeds", default="0,1,2")
    b.add_argument("--beta-sweep", help="comma-separated betas applied to every non-baseline system")
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--out", default="ablation")
    b.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="print a saved ablation table")
    r.add_argument("--results", default="ablation")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    if extra and args.command in ("average", "report", "evaluate"):
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    try:
        return args.func(args, extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        if exc.dump_path:
            print(f"last batch dumped to {exc.dump_path}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CorpusError, CheckpointError, VocabError, MetricError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:
        log.exception("unexpected failure")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
