"""``madi`` command line: corpus generation, pretraining, adaptation, scoring.

Every subcommand that trains writes a JSON-lines metrics file next to its
output.  Setting ``MADI_SEED`` overrides the seed in the config file.  A NaN
or Inf during training exits with status 3.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .adaptation import METHODS, canonical_method
from .harness import (
    ExperimentConfig,
    FeatureCache,
    TrainingDiverged,
    adapt,
    dump_centroids,
    evaluate,
    format_matrix,
    matrix_csv,
    pretrain,
    run_matrix,
)
from .model import load_checkpoint, save_checkpoint
from .synth import SPLITS, generate_corpus, write_manifest

EXIT_DIVERGED = 3

# "test" scores both test splits so the report carries per-domain aggregates
SPLIT_ALIASES = {"test": ("source_test", "target_test"), "train": ("source_train", "target_train")}


def _metrics_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".metrics.jsonl")


def _checkpoint_config(extra: dict) -> ExperimentConfig:
    if "config" not in extra:
        raise SystemExit("checkpoint carries no experiment config; pass --config")
    return ExperimentConfig.from_dict(extra["config"])


def _splits(name: str) -> tuple[str, ...]:
    if name in SPLIT_ALIASES:
        return SPLIT_ALIASES[name]
    if name not in SPLITS:
        raise SystemExit(f"unknown split {name!r}; choose from {sorted(SPLIT_ALIASES) + list(SPLITS)}")
    return (name,)


def cmd_gen_corpus(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    manifest = write_manifest(generate_corpus(cfg.corpus), args.out)
    print(manifest)
    return 0


def cmd_pretrain(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    model, records = pretrain(cfg, metrics_path=_metrics_path(args.out))
    save_checkpoint(args.out, model, extra={"config": cfg.to_dict(), "stage": "pretrain"})
    print(f"{args.out}: final loss {records[-1]['l_asr']:.4f}")
    return 0


def cmd_adapt(args) -> int:
    model, extra, _ = load_checkpoint(args.ckpt)
    cfg = ExperimentConfig.load(args.config) if args.config else _checkpoint_config(extra)
    d = cfg.to_dict()
    d["adaptation"]["method"] = canonical_method(args.method)
    cfg = ExperimentConfig.from_dict(d)
    corpus = generate_corpus(cfg.corpus)
    adapted, _ = adapt(model, cfg, corpus["source_train"], corpus.unlabeled("target_train"),
                       metrics_path=_metrics_path(args.out))
    save_checkpoint(args.out, adapted, extra={"config": cfg.to_dict(), "stage": "adapt"})
    print(args.out)
    return 0


def cmd_evaluate(args) -> int:
    model, extra, _ = load_checkpoint(args.ckpt)
    cfg = ExperimentConfig.load(args.config) if args.config else _checkpoint_config(extra)
    corpus = generate_corpus(cfg.corpus)
    utts = [u for s in _splits(args.split) for u in corpus[s]]
    report = evaluate(model, utts, FeatureCache(cfg.feat_dim))
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    summary = ", ".join(f"{d} WER {v['wer']:.4f}" for d, v in report.by_domain.items())
    print(f"WER {report.wer:.4f} CER {report.cer:.4f} ({summary})")
    return 0


def cmd_dump_centroids(args) -> int:
    model, extra, _ = load_checkpoint(args.ckpt)
    cfg = ExperimentConfig.load(args.config) if args.config else _checkpoint_config(extra)
    corpus = generate_corpus(cfg.corpus)
    utts = [u for s in _splits(args.split) for u in corpus[s]]
    rows = dump_centroids(model, utts, args.out, FeatureCache(cfg.feat_dim))
    print(f"{args.out}: {len(rows)} rows")
    return 0


def matrix_configs(path, seeds=None) -> dict[str, ExperimentConfig]:
    """Expand a config file into named matrix cells.

    An optional ``"matrix"`` block lists ``tasks`` (name -> corpus field
    overrides, typically a ``shift``) and ``seeds``.  Without it the file is
    a single task.
    """
    base = ExperimentConfig.load(path)
    block = json.loads(Path(path).read_text()).get("matrix", {})
    tasks = block.get("tasks") or {"default": {}}
    seeds = seeds if seeds is not None else block.get("seeds", [base.seed])
    out = {}
    for name, overrides in tasks.items():
        for seed in seeds:
            d = base.with_seed(seed).to_dict()
            d["corpus"].update(overrides)
            label = name if len(seeds) == 1 else f"{name}/seed{seed}"
            out[label] = ExperimentConfig.from_dict(d)
    return out


def cmd_run_matrix(args) -> int:
    configs = matrix_configs(args.config, args.seeds)
    methods = [canonical_method(m) for m in args.methods] if args.methods else list(METHODS)
    out = Path(args.out)
    cells, averages = run_matrix(configs, methods, out_dir=out.with_suffix(""))
    out.write_text(matrix_csv(cells, averages, methods))
    print(format_matrix(cells, averages, methods))
    failed = [c for c in cells if c.error]
    for c in failed:
        print(f"cell {c.config}/{c.method} failed: {c.error}", file=sys.stderr)
    return EXIT_DIVERGED if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="madi", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-corpus", help="synthesize the two-domain corpus as WAV + manifest")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_corpus)

    s = sub.add_parser("pretrain", help="train on labeled source audio")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("adapt", help="adapt a pretrained checkpoint to the target domain")
    s.add_argument("--method", required=True, type=str.lower, choices=[m.lower() for m in METHODS])
    s.add_argument("--ckpt", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_adapt)

    s = sub.add_parser("evaluate", help="greedy-decode a split and report WER/CER")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("dump-centroids", help="write per-domain character centroids as CSV")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dump_centroids)

    s = sub.add_parser("run-matrix", help="pretrain, adapt with every method, tabulate target WER")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--methods", nargs="+")
    s.set_defaults(func=cmd_run_matrix)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
