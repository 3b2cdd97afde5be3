"""Command-line entry point (``python -m app.main <command> [flags]``)."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Dict, List, Optional, Sequence

from app import __version__
from app.config import get_settings
from app.exceptions import BenchmarkNotFoundError, ConfigError, QuadLabError
from app.services import experiments

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUN_FAILED = 1
EXIT_USAGE = 2


def _csv_list(value: str) -> List[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


def _int_list(value: str) -> List[int]:
    try:
        return [int(item) for item in _csv_list(value)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--fold", type=int, help="held-out fold 0..K-1")
    common.add_argument("--methods", type=_csv_list, help="comma-separated method keys")
    common.add_argument("--memory-sizes", type=_int_list, help="comma-separated memory capacities")
    common.add_argument("--selection", choices=list(experiments.selection_choices()))
    common.add_argument("--repeats", type=int, help="consecutive seeds per cell")
    common.add_argument("--benchmark-dir", help="benchmark root directory")
    common.add_argument("--out", help="output directory")

    parser = argparse.ArgumentParser(
        prog="quadlab",
        description="Question-only replay for continual VQA on a synthetic benchmark.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="generate and export the benchmark")
    sub.add_parser("run", parents=[common], help="one run per method")
    sub.add_parser("sweep-memory", parents=[common], help="AP/Forget across memory sizes")
    sub.add_parser("sweep-selection", parents=[common], help="random vs object-matched selection")
    sub.add_parser("ablate", parents=[common], help="stability-loss component and attention variants")
    sub.add_parser("matrix", parents=[common], help="accuracy matrices for heatmaps")
    sub.add_parser("kfold", parents=[common], help="novel-composition accuracy over all folds")
    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict[str, object]:
    return {
        "seed": args.seed,
        "fold": args.fold,
        "methods": args.methods,
        "memory_sizes": args.memory_sizes,
        "train.selection": args.selection,
        "repeats": args.repeats,
        "benchmark_dir": args.benchmark_dir,
        "output_dir": args.out,
    }


def configure_logging() -> None:
    settings = get_settings()
    logging.basicConfig(
        level=getattr(logging, settings.LOG_LEVEL, logging.INFO),
        format="%(asctime)s | %(levelname)-8s | %(name)s | %(message)s",
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging()
    settings = get_settings()
    logger.info("Starting %s v%s (env=%s) command=%s", settings.APP_NAME, __version__,
                settings.APP_ENV, args.command)

    try:
        config = experiments.load_config(args.config, overrides_from_args(args))
        if args.command == "generate":
            manifest = experiments.cmd_generate(config)
            print(json.dumps({"sub_tasks": len(manifest.sub_tasks), "files": len(manifest.files)}))
        else:
            result = experiments.COMMANDS[args.command](config)
            print(json.dumps(result, indent=2, default=str))
    except (ConfigError, BenchmarkNotFoundError) as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (QuadLabError, OSError) as exc:
        logger.error("Command %s failed: %s", args.command, exc, exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
