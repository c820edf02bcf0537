"""Command-line entry point.

    edistill partition --config run.yaml
    edistill train-teachers --config run.yaml
    edistill distill --config run.yaml [--resume] [--baseline kd]
    edistill evaluate --config run.yaml --checkpoint runs/ed/final.ckpt
    edistill report --run runs/ed

Exit codes: 0 success, 2 config error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from edistill import pipeline
from edistill.config import ConfigError, RunConfig
from edistill.trainer import Interrupted

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _global_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int, help="override output.seed and partition.seed")
    p.add_argument("--out-dir", help="override output.out_dir")
    p.add_argument("--deterministic", action="store_true", default=None)
    p.add_argument("--device", default="cpu", choices=["cpu"], help="only cpu is supported")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edistill", description="Staged education distillation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="split the dataset into sub-datasets")
    _global_flags(p)

    p = sub.add_parser("train-teachers", help="train one teacher per sub-dataset")
    _global_flags(p)

    p = sub.add_parser("distill", help="run staged distillation")
    _global_flags(p)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--baseline", choices=["kd"], help="single-stage vanilla KD on the full dataset")
    p.add_argument("--stop-after-epoch", type=int, help=argparse.SUPPRESS)

    p = sub.add_parser("evaluate", help="top-1 accuracy of a checkpoint")
    _global_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("report", help="regenerate tables and plots from a run's metrics log")
    p.add_argument("--run", type=Path, required=True)
    return parser


def load_config(args) -> RunConfig:
    if args.config is None:
        raise ConfigError("--config is required")
    cfg = RunConfig.load(args.config)
    out = cfg.output
    if args.seed is not None:
        out = dataclasses.replace(out, seed=args.seed)
        cfg = dataclasses.replace(cfg, partition=dataclasses.replace(cfg.partition, seed=args.seed))
    if args.out_dir is not None:
        out = dataclasses.replace(out, out_dir=args.out_dir)
    if args.deterministic:
        out = dataclasses.replace(out, deterministic=True)
    return dataclasses.replace(cfg, output=out)


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            if not (args.run / pipeline.METRICS_FILE).exists():
                print(f"error: no metrics log in {args.run}", file=sys.stderr)
                return EXIT_RUNTIME
            for path in pipeline.regenerate_report(args.run):
                print(path)
            return EXIT_OK
        cfg = load_config(args)
        if args.command == "partition":
            path, part = pipeline.write_partition(cfg)
            print(f"wrote {path}")
            print("group sizes: " + "/".join(str(n) for n in part.sizes()))
        elif args.command == "train-teachers":
            rows = pipeline.train_teachers(cfg)
            print("teacher\ttrain_top1\ttest_top1\tcheckpoint")
            for r in rows:
                print(f"{r['teacher']}\t{r['train_top1']:.2f}\t{r['test_top1']:.2f}\t{r['checkpoint']}")
        elif args.command == "distill":
            report = pipeline.run_education_distillation(
                cfg, resume=args.resume, baseline=args.baseline == "kd", stop_after_epoch=args.stop_after_epoch
            )
            print(f"final top-1: {report.final_top1:.2f}")
            for t, acc in sorted(report.per_subset.items()):
                print(f"sub-dataset {t}: {acc:.2f}")
            print(report.matrix.to_markdown(), end="")
        elif args.command == "evaluate":
            if not args.checkpoint.exists():
                print(f"error: checkpoint {args.checkpoint} not found", file=sys.stderr)
                return EXIT_RUNTIME
            accs = pipeline.evaluate(cfg, args.checkpoint)
            print(f"all\t{accs['all']:.2f}")
            for t in sorted(k for k in accs if k != "all"):
                print(f"{t}\t{accs[t]:.2f}")
    except Interrupted as e:
        print(f"{e}; continue with --resume")
        return EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
