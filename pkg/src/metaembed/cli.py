"""Command-line entry point.

Examples
--------
::

    metaembed --out run1 generate
    metaembed --out run1 train-views
    metaembed --out run1 train-meta
    metaembed --out run1 fuse --method svd
    metaembed --out run1 evaluate --tasks sem,rel --embeddings run1/meta/meta_embeddings.csv
    metaembed --out run1 --seed 3 run-all
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import load_config
from .exceptions import (
    ConfigError,
    ContractViolation,
    MissingArtifactError,
    NumericError,
    ParseError,
    TrainingError,
)
from .pipeline import TASKS, Pipeline

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_TASK_FAILED = 3
EXIT_MISSING = 4
EXIT_TRAINING = 5


def _setup_logging():
    name = os.environ.get("M2M_LOG", "error").lower()
    if name not in LOG_LEVELS:
        raise ConfigError(f"M2M_LOG must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _task_list(text):
    tasks = tuple(t.strip() for t in text.split(",") if t.strip())
    bad = [t for t in tasks if t not in TASKS]
    if bad or not tasks:
        raise argparse.ArgumentTypeError(f"tasks must be drawn from {','.join(TASKS)}")
    return tasks


def build_parser():
    p = argparse.ArgumentParser(prog="metaembed",
                                description="Multi-view medical concept embedding pipeline.")
    p.add_argument("--config", help="TOML config file (defaults if omitted)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", help="write records and label files")
    sub.add_parser("train-views", help="train one graph autoencoder per view")
    tm = sub.add_parser("train-meta", help="fuse source embeddings")
    tm.add_argument("--variant", default="M2M",
                    choices=["M2M", "M2M_d", "M2M_l", "M2M_n", "M2M_s"])
    fu = sub.add_parser("fuse", help="baseline fusion")
    fu.add_argument("--method", required=True, choices=["conc", "avg", "svd", "hot"])
    ev = sub.add_parser("evaluate", help="score an embedding file")
    ev.add_argument("--tasks", type=_task_list, default=TASKS)
    ev.add_argument("--embeddings", required=True)
    sub.add_parser("run-all", help="every step plus the comparison table")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        cfg = load_config(args.config, args.seed)
        pipe = Pipeline(cfg, args.out)
        if args.command == "generate":
            pipe.generate()
            print(pipe.path("manifest.json"))
        elif args.command == "train-views":
            pipe.train_views()
            print(pipe.path("views"))
        elif args.command == "train-meta":
            path, _ = pipe.train_meta(args.variant)
            print(path)
        elif args.command == "fuse":
            print(pipe.fuse(args.method))
        elif args.command == "evaluate":
            path, report = pipe.evaluate(args.embeddings, args.tasks)
            print(json.dumps(report["reports"], indent=2, sort_keys=True))
            failed = [r["task"] for r in report["reports"] if r.get("metrics") is None]
            if failed:
                print(f"tasks without a report: {','.join(failed)}", file=sys.stderr)
                return EXIT_TASK_FAILED
        elif args.command == "run-all":
            pipe.run_all()
            with open(pipe.path("run_all_table.txt"), encoding="utf-8") as fh:
                print(fh.read(), end="")
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, ContractViolation, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
