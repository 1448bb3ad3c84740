"""Command line entry point: ``neurode train`` and ``neurode evaluate``.

Exit codes: 0 success, 2 configuration or checkpoint error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from ..nn import CheckpointError
from .config import ConfigError, ExperimentConfig
from .experiment import NumericalFailure, evaluate, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neurode", description="Train and evaluate continuous-depth models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default="out")
    t.add_argument("--seed", type=int, default=None, help="override the config seed")
    t.add_argument("--dump-trajectory", action="store_true")

    e = sub.add_parser("evaluate", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--out", default=None)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.command == "train":
            if args.seed is not None:
                cfg.seed = args.seed
            report = train(cfg, args.out, dump_traj=args.dump_trajectory)
        else:
            report = evaluate(args.checkpoint, cfg, args.out)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    summary = " ".join(f"{k}={v:.6g}" for k, v in report.final.items())
    print(f"{args.command}: {summary} wall_time={report.wall_time:.2f}s")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
