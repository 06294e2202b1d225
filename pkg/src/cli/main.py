#!/usr/bin/env python3
"""
Main CLI entry point for the LSGC steganalysis toolkit.
"""

import argparse
import logging
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from src.app.config import load_run_config
from src.app.core.processor import LsgcProcessor
from src.app.exceptions import LsgcError, UsageError
from src.app.schema.schemas import Mode

logger = logging.getLogger(__name__)


def _r_list(value: str):
    try:
        values = [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{value}'")
    if not values:
        raise argparse.ArgumentTypeError("empty r list")
    return values


def _mode(value: str) -> Mode:
    try:
        return Mode.parse(value)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Run configuration file")
    common.add_argument("--seed", type=int, help="Seed for every seeded stage")
    common.add_argument("--out", help="Output directory (default: LSGC_OUTPUT_DIR or ./runs)")

    parser = _Parser(
        description="LSGC - linguistic steganalysis in generation and classification mode",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  lsgc synth --out runs/demo                        # Cover and stego corpora
  lsgc prepare --corpus runs/demo/corpus --out runs/demo
  lsgc train --splits runs/demo/splits --mode cls --out runs/demo/cls
  lsgc bench --splits runs/demo/splits --out runs/demo/bench
  lsgc ablate-r --splits runs/demo/splits --r-list 2,4,8
  lsgc gradcheck                                    # Verify every gradient
        """
    )
    subparsers = parser.add_subparsers(dest="command", parser_class=_Parser, help="Available commands")

    subparsers.add_parser("synth", parents=[common], help="Synthesize cover and stego corpora")

    prepare_parser = subparsers.add_parser("prepare", parents=[common], help="Filter, balance and split corpora")
    prepare_parser.add_argument("--corpus", required=True, help="Directory written by 'synth'")

    subparsers.add_parser("pretrain", parents=[common], help="Pretrain a base model on the seed corpus")

    train_parser = subparsers.add_parser("train", parents=[common], help="Fine-tune a detector")
    train_parser.add_argument("--splits", required=True, help="Splits root or one split directory")
    train_parser.add_argument("--mode", type=_mode, help="gen or cls (default from config)")
    train_parser.add_argument("--repeats", type=int, help="Runs over consecutive seeds")

    eval_parser = subparsers.add_parser("eval", parents=[common], help="Evaluate a saved detector")
    eval_parser.add_argument("--checkpoint", required=True, help="Checkpoint written by 'train'")
    eval_parser.add_argument("--splits", required=True, help="Splits root or one split directory")
    eval_parser.add_argument("--split", default="test", choices=["train", "val", "test"])
    eval_parser.add_argument("--mode", type=_mode, help="Expected mode of the checkpoint")

    bench_parser = subparsers.add_parser("bench", parents=[common], help="Time both training modes")
    bench_parser.add_argument("--splits", required=True, help="Splits root or one split directory")

    ablate_parser = subparsers.add_parser("ablate-r", parents=[common], help="LoRA rank ablation")
    ablate_parser.add_argument("--splits", required=True, help="Splits root or one split directory")
    ablate_parser.add_argument("--r-list", type=_r_list, help="Comma-separated ranks (default from config)")

    subparsers.add_parser("gradcheck", parents=[common], help="Finite-difference check of all gradients")

    report_parser = subparsers.add_parser("report", parents=[common], help="Merge reports from several runs")
    report_parser.add_argument("--runs", nargs="+", required=True, help="Run directories holding *report.json")
    return parser


def run(args) -> None:
    config = load_run_config(args.config)
    if getattr(args, "repeats", None) is not None and args.repeats < 1:
        raise UsageError("--repeats must be at least 1")
    processor = LsgcProcessor(config, out_dir=args.out, seed=args.seed, config_path=args.config)

    if args.command == "synth":
        counts = processor.synthesize()
        print(f"Synthesized corpora: {counts}")
    elif args.command == "prepare":
        sizes = processor.prepare(args.corpus)
        print(f"Prepared splits: {sizes}")
    elif args.command == "pretrain":
        path = processor.pretrain()
        print(f"Base model saved to {path}")
    elif args.command == "train":
        report = processor.train(args.splits, args.mode, args.repeats)
        print(f"Trained {len(report.metrics)} detector(s); report in {processor.out_dir}")
    elif args.command == "eval":
        report = processor.evaluate(args.checkpoint, args.splits, args.split, args.mode)
        for row in report.metrics:
            print(f"{row.dataset}: accuracy {row.accuracy:.4f}, F1 {row.f1:.4f}")
    elif args.command == "bench":
        report = processor.bench(args.splits)
        print(f"Classification mode saved {100 * report.benchmark.reduction:.2f}% of generation-mode time")
    elif args.command == "ablate-r":
        report = processor.ablate_r(args.splits, args.r_list)
        print(f"Ablation finished: {len(report.ablation)} cells")
    elif args.command == "gradcheck":
        results = processor.gradcheck()
        print(f"Gradient check passed for {len(results)} tensors")
    elif args.command == "report":
        report = processor.report(args.runs)
        print(f"Merged {len(report.metrics)} metric rows into {processor.out_dir}")


def main(argv=None) -> int:
    """
    Main CLI function.

    Parses command line arguments, runs the command and maps errors to exit codes.
    """
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help()
            return 2
        run(args)
        return 0
    except KeyboardInterrupt:
        print("\nOperation cancelled by user")
        return 130
    except LsgcError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception("Unexpected failure")
        print(f"Error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
