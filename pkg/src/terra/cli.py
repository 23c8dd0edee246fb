"""Command-line entry point.

Subcommands:
  generate   write per-seed panel CSVs and the generator manifest
  train      train the transformer on one seed; write checkpoint and log
  evaluate   score a checkpoint on a fresh evaluation panel
  run        full experiment: generate, fit every method, evaluate, persist
  summarize  merge metrics.csv files into a ranked summary table

All subcommands accept ``--config PATH`` (key=value text; empty or missing
means all defaults), ``--seed N`` (overrides the config's base seed), and
``--out DIR`` (overrides the config's output directory). ``run`` also takes
``--dry-run`` to emit the manifest and planned-run listing only.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .datagen import generate
from .experiment import (EVAL_SEED_OFFSET, ConfigError, ExperimentConfig,
                         generate_panels, parse_config, run_experiment,
                         write_summary)
from .metrics import evaluate
from .model import TerraModel
from .training import TRAINING_LOG_COLUMNS, train

__all__ = ["main", "build_parser"]


def _load_config(args) -> ExperimentConfig:
    text = ""
    if args.config is not None:
        text = Path(args.config).read_text()
    cfg = parse_config(text)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None) is not None:
        cfg.output_dir = args.out
    return cfg


def _cmd_generate(args) -> int:
    cfg = _load_config(args)
    paths = generate_panels(cfg)
    for path in paths:
        print(path)
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    panel, _ = generate(cfg.spec(cfg.seed))
    result = train(panel, cfg.arch(), cfg.train_config(cfg.seed))
    ckpt = out_dir / f"checkpoint_seed{cfg.seed}.npz"
    result.model.save(ckpt)
    from .experiment import _write_csv  # shared formatter
    _write_csv(out_dir / f"training_log_seed{cfg.seed}.csv",
               TRAINING_LOG_COLUMNS, result.log)
    print(f"best epoch {result.best_epoch} "
          f"val_total {result.best_val_total:.6f} -> {ckpt}")
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    model = TerraModel.load(args.checkpoint)
    eval_n = cfg.n if cfg.eval_n is None else cfg.eval_n
    panel, _ = generate(cfg.spec(cfg.seed + EVAL_SEED_OFFSET, n=eval_n))
    report = evaluate(model, panel)
    for row in report.to_rows("terra", cfg.seed):
        print(f"t={row['timepoint']} mse={row['mse']:.6f} "
              f"spearman={row['spearman']:.4f}")
    return 0


def _cmd_run(args) -> int:
    cfg = _load_config(args)
    return run_experiment(cfg, dry_run=args.dry_run)


def _cmd_summarize(args) -> int:
    out = args.out if args.out is not None else "."
    write_summary(args.metrics, out)
    print((Path(out) / "summary.txt").read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="terra",
        description="Longitudinal treatment-effect experiments: data "
                    "generation, training, baselines, and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, default=None,
                       help="key=value config file (defaults when omitted)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config base seed")
        p.add_argument("--out", type=str, default=None,
                       help="override the config output directory")

    p = sub.add_parser("generate", help="write per-seed panel CSVs")
    common(p)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("train", help="train the transformer on one seed")
    common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a fresh panel")
    common(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("run", help="full multi-seed experiment")
    common(p)
    p.add_argument("--dry-run", action="store_true",
                   help="write manifest and planned runs only")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("summarize", help="rank methods across metrics files")
    p.add_argument("metrics", nargs="+", help="metrics.csv paths")
    p.add_argument("--out", type=str, default=None)
    p.set_defaults(func=_cmd_summarize)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
