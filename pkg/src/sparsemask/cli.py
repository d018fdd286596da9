"""Command-line front end: train, prune, eval, sweep, report-layers.

Exit codes: 0 success, 2 config error, 3 data/state error, 4 prune
timeout, 5 numeric failure (NaN/Inf).
"""

from __future__ import annotations

import argparse
import json
import sys

from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .data import DataError
from .nn import StateError
from .pruning import DegenerateSaliencyError, PruneTimeout
from .runner import cmd_eval, cmd_prune, cmd_report_layers, cmd_sweep, cmd_train
from .tensor import NumericError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TIMEOUT = 4
EXIT_NUMERIC = 5


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsemask",
        description="Train and prune small networks with learned sparse masks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON run config")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="run seed (overrides config)")
        p.add_argument("--preset", help="schedule preset name (e.g. desk, full)")

    add_common(sub.add_parser("train", help="dense training with checkpoints"))
    add_common(sub.add_parser("prune", help="run the configured pruning pipeline"))

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    add_common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", choices=("train", "test"), default="test")

    add_common(sub.add_parser("sweep", help="mask-shrinkage grid over alpha x lr"))

    p_report = sub.add_parser("report-layers", help="per-layer sparsity CSV + figure")
    p_report.add_argument("--checkpoint", required=True)
    p_report.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report-layers":
            rows = cmd_report_layers(args.checkpoint, args.out)
            for name, total, nonzero, pct in rows:
                print(f"{name:>16}  {nonzero:>9}/{total:<9}  {pct:7.3f}%")
            return EXIT_OK

        cfg = load_config(args.config, preset=args.preset, out_dir=args.out, seed=args.seed)
        if args.command == "train":
            summary = cmd_train(cfg)
        elif args.command == "prune":
            summary = cmd_prune(cfg)
        elif args.command == "eval":
            summary = cmd_eval(args.checkpoint, cfg, split=args.split)
        elif args.command == "sweep":
            summary = cmd_sweep(cfg)
        else:  # pragma: no cover
            raise ConfigError(f"unknown command {args.command!r}")
        print(json.dumps(summary, indent=2, sort_keys=True, default=str))
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, StateError, DegenerateSaliencyError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except PruneTimeout as exc:
        print(f"prune timeout: {exc}", file=sys.stderr)
        for step, n_active, loss in exc.state.history[-10:]:
            print(f"  step {step}: N_c={n_active} loss={loss:.5f}", file=sys.stderr)
        return EXIT_TIMEOUT
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
