import argparse
import logging
import os
import sys
from typing import Any, Dict, List, Optional

import pandas as pd
from dotenv import load_dotenv

from .orchestrator import Orchestrator, run_sweep
from .utilities.scenario_config import ConfigError, load_config

# Load environment variables from the .env file
load_dotenv()

CONFIG_FILE_PATH = "config.json"
INPUT_FILE_PATH = "input.json"

logger = logging.getLogger(__name__)


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    algorithm = {}
    if args.seed is not None:
        algorithm["seed"] = args.seed
    if args.horizon is not None:
        algorithm["horizon"] = args.horizon
    if algorithm:
        overrides["algorithm"] = algorithm
    if getattr(args, "dump_matrices", False):
        overrides["output"] = {"dump_matrices": True}
    return overrides


def cmd_run(args: argparse.Namespace) -> int:
    source = args.preset or args.scenario or INPUT_FILE_PATH
    scenario = load_config(source, _overrides(args))
    pipeline = Orchestrator(config_path=args.config, scenario=scenario, out_dir=args.out_dir)
    return 0 if pipeline.run_pipeline() else 1


def cmd_sweep(args: argparse.Namespace) -> int:
    ok = run_sweep(args.preset, config_path=args.config, overrides=_overrides(args), out_dir=args.out_dir)
    return 0 if ok else 1


def cmd_report(args: argparse.Namespace) -> int:
    if not os.path.exists(args.path):
        raise FileNotFoundError(f"Bound report not found: {args.path}")
    with open(args.path, "r", encoding="utf-8") as f:
        header = [line.rstrip("\n") for line in f if line.startswith("#")]
    table = pd.read_csv(args.path, sep="\t", comment="#")
    for line in header:
        if not line.startswith("# constant") or args.constants:
            print(line)
    with pd.option_context("display.max_rows", None, "display.width", 160, "display.float_format", "{:.6g}".format):
        print(table.to_string(index=False))
    failed = table[table["status"] == "FAIL"]
    print(f"\n{len(table)} check(s), {len(failed)} failing")
    return 1 if len(failed) else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wnv-sim",
        description="Online multi-cell MIMO virtualization precoding simulator",
    )
    parser.add_argument("--config", default=CONFIG_FILE_PATH, help="technical settings (default: config.json)")
    parser.add_argument("--log-level", default=None, help="overrides LOG_LEVEL from the environment")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_flags(p: argparse.ArgumentParser):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--horizon", type=int, default=None, help="number of slots T")
        p.add_argument("--out-dir", default=None)
        p.add_argument("--dump-matrices", action="store_true", help="write per-slot H, D and V matrices")

    run = sub.add_parser("run", help="run one scenario")
    run.add_argument("scenario", nargs="?", default=None, help="scenario JSON file (default: input.json)")
    run.add_argument("--preset", default=None, help="named preset instead of a scenario file")
    add_run_flags(run)
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="run every configuration of a preset sweep")
    sweep.add_argument("preset")
    add_run_flags(sweep)
    sweep.set_defaults(func=cmd_sweep)

    report = sub.add_parser("report", help="pretty-print a bounds_<hash>.tsv file")
    report.add_argument("path")
    report.add_argument("--constants", action="store_true", help="also print the constants header")
    report.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = (args.log_level or os.getenv("LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    try:
        return args.func(args)
    except FileNotFoundError as e:
        logger.critical(f"A required file was not found: {e}")
        return 2
    except ConfigError as e:
        logger.critical(f"Invalid configuration: {e}")
        return 2
    except Exception as e:
        logger.critical(f"An unexpected critical error occurred: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
