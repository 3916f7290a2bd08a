import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from pydantic import ValidationError

from hybrid_control.cli.commands import cmd_estimate, cmd_simulate, cmd_validate
from hybrid_control.core.config import Config
from hybrid_control.core.exceptions import ConfigError, EstimationError, HybridControlError
from hybrid_control.core.logging import setup_logging
from hybrid_control.models.run_config import RunConfig
from hybrid_control.models.simulation import SimulationGridConfig

logger = logging.getLogger("hybrid_control.main")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hybrid_control",
        description="Treatment effect estimation for trials augmented with external controls",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {Config.VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("estimate", "run the estimation pipeline on a CSV file"),
        ("simulate", "run the Monte Carlo simulation grid"),
        ("validate", "check a CSV file against the data rules"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", help="JSON config file (defaults to the shipped config)")
        cmd.add_argument("--out", help="output directory")
        cmd.add_argument("--seed", type=int, help="run seed")
        cmd.add_argument("--threads", type=int, help="worker threads")
        cmd.add_argument("--log-level", default="WARNING", help="stderr log level")
        if name != "simulate":
            cmd.add_argument("--input", help="input CSV file")
        if name != "validate":
            cmd.add_argument("--alpha", type=float, help="significance level")
            cmd.add_argument("--estimators", help="comma-separated subset of aipw,acw,acw_alasso,acw_alasso_gbm")
        if name == "estimate":
            cmd.add_argument("--influence", action="store_true", help="also write influence.csv")
        if name == "simulate":
            cmd.add_argument("--replications", type=int, help="replications per cell")
    return parser


def _read_json(path: Path) -> Dict[str, Any]:
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as file:
            return json.load(file)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file is not valid JSON: {path}", {"line": e.lineno, "column": e.colno})


def _config_source(args: argparse.Namespace, default: Path) -> Dict[str, Any]:
    if args.config:
        return _read_json(Path(args.config))
    return _read_json(default) if default.exists() else {}


def _estimator_list(raw: Optional[str]) -> Optional[List[str]]:
    if raw is None:
        return None
    return [name.strip() for name in raw.split(",") if name.strip()]


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    """Model defaults < JSON file < command-line flags."""
    values = _config_source(args, Config.CONFIG_FILE)
    values["command"] = args.command
    overrides = {
        "input": getattr(args, "input", None),
        "out": args.out,
        "seed": args.seed,
        "threads": args.threads,
        "alpha": getattr(args, "alpha", None),
        "estimators": _estimator_list(getattr(args, "estimators", None)),
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    if getattr(args, "influence", False):
        values["write_influence"] = True
    try:
        return RunConfig.model_validate(values)
    except ValidationError as e:
        raise ConfigError("Invalid run configuration", {"errors": json.loads(e.json())})


def resolve_simulation_config(args: argparse.Namespace) -> SimulationGridConfig:
    values = _config_source(args, Config.SIMULATION_FILE)
    base = dict(values.get("base", {}))
    if args.seed is not None:
        base["seed"] = args.seed
    if args.replications is not None:
        base["replications"] = args.replications
    values["base"] = base
    overrides = {
        "threads": args.threads,
        "alpha": args.alpha,
        "estimators": _estimator_list(args.estimators),
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return SimulationGridConfig.model_validate(values)
    except ValidationError as e:
        raise ConfigError("Invalid simulation configuration", {"errors": json.loads(e.json())})


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        if args.command == "simulate":
            grid = resolve_simulation_config(args)
            return cmd_simulate(grid, args.out or "out")
        config = resolve_run_config(args)
        logger.info("Resolved config: %s", config.model_dump_json())
        if args.command == "validate":
            return cmd_validate(config)
        return cmd_estimate(config)
    except HybridControlError as e:
        logger.debug("%s failed", args.command, exc_info=True)
        return _report_failure(e)
    except np.linalg.LinAlgError as e:
        logger.debug("%s failed", args.command, exc_info=True)
        return _report_failure(EstimationError(f"Linear algebra failure: {e}"))
    except Exception as e:
        logger.error("%s failed unexpectedly", args.command, exc_info=True)
        return _report_failure(HybridControlError(f"{type(e).__name__}: {e}", {"exception": type(e).__name__}))


def _report_failure(error: HybridControlError) -> int:
    sys.stderr.write(json.dumps(error.to_dict(), default=str) + "\n")
    return error.exit_code


if __name__ == "__main__":
    sys.exit(main())
