"""Command-line front end.

Subcommands:
  run       Monte Carlo sweep from a config file -> CSV + summary table
  converge  per-EM-iteration trace CSV for a single sweep point
  selftest  closed-form-vs-oracle agreement checks

Exit codes: 0 clean, 1 flagged trials / failed checks, 2 bad config.
"""

import argparse
import sys
from dataclasses import replace

from .experiment import (ConfigError, parse_config, report_convergence,
                         run_experiment, selftest)


def _load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="sparsechan",
        description="clustered-sparse channel estimation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a Monte Carlo sweep")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", help="override config output_path")
    p_run.add_argument("--seed", type=int, help="override config seed")
    p_run.add_argument("--trials", type=int, help="override config trials")
    p_run.add_argument("--jobs", type=int, default=1,
                       help="worker processes (default 1)")
    p_run.add_argument("--timing", action="store_true",
                       help="fill the wall_ms column (breaks byte-identical "
                            "reruns)")

    p_conv = sub.add_parser("converge", help="per-iteration trace CSV")
    p_conv.add_argument("--config", required=True)

    sub.add_parser("selftest", help="oracle agreement checks")

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            cfg = _load_config(args.config)
            if args.out is not None:
                cfg = replace(cfg, output_path=args.out)
            if args.seed is not None:
                if not 0 <= args.seed < 2 ** 64:
                    raise ConfigError("--seed must fit in 64 bits")
                cfg = replace(cfg, seed=args.seed)
            if args.trials is not None:
                if args.trials < 1:
                    raise ConfigError("--trials must be >= 1")
                cfg = replace(cfg, trials=args.trials)
            if args.jobs < 1:
                raise ConfigError("--jobs must be >= 1")
            _, flagged = run_experiment(cfg, jobs=args.jobs,
                                        timing=args.timing)
            return 1 if flagged else 0
        if args.command == "converge":
            cfg = _load_config(args.config)
            flagged = report_convergence(cfg)
            return 1 if flagged else 0
        return selftest()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
