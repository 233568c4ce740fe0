"""Command line entry point: ``assimila twin`` and ``assimila validate``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ..errors import ConfigError
from .config import load_config
from .twin import TwinFailure, run_twin

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="assimila", description="Data assimilation twin experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("twin", help="run a twin experiment and write report.json and series.csv")
    t.add_argument("--config", required=True, type=Path)
    t.add_argument("--seed", type=int, default=None, help="override the config seed")
    t.add_argument("--out", type=Path, default=None, help="output directory")
    v = sub.add_parser("validate", help="check a config file")
    v.add_argument("--config", required=True, type=Path)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "validate":
            print(f"{args.config}: ok ({cfg.method})")
            return EXIT_OK
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise ConfigError("seed: must be an unsigned 64-bit integer")
            cfg = cfg.with_seed(args.seed)
        report = run_twin(cfg)
    except ConfigError as e:
        for msg in e.errors:
            print(f"config error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except TwinFailure as e:
        print(f"solver failure: {e}", file=sys.stderr)
        return EXIT_SOLVER
    out = args.out if args.out is not None else Path(cfg["output"]["dir"])
    rpath, spath = report.write(out, cfg["output"]["report"], cfg["output"]["series"])
    s = report.summary
    print(f"{report.method}: mean analysis RMSE {s['mean_rmse_analysis']:.4g}, "
          f"forecast {s['mean_rmse_forecast']:.4g}")
    print(f"wrote {rpath} and {spath}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
