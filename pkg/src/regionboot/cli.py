# Copyright 2025 The regionboot Authors.
# See LICENSE file for licensing details.

"""Command-line front end: analyze, table2, curve and coverage."""

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from regionboot.analysis import (
    COVERAGE_COLUMNS,
    COVERAGE_FILE,
    CURVE_FILE,
    TABLE2_FILE,
    analyze_table,
    curve_frame,
    parse_table2_rows,
    resolve_observation,
    restrict_plan,
    run_analysis,
    run_coverage,
    table2_row,
    write_analysis,
)
from regionboot.config import LOG_LEVELS, RunConfig
from regionboot.exceptions import ConfigError, ErrorWithStatus, ExitStatus
from regionboot.fit import fit_onestep
from regionboot.model import ModelSpec, build_model
from regionboot.resample import (
    ScalePlan,
    build_table,
    default_scale_plan,
    read_scale_plan,
    read_table,
)
from regionboot.statfun import RandomStream

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# flag name -> help; every flag defaults to None so the config layers underneath show through
COMMON_FLAGS = {
    "--model": "model name or package.module:factory plug-in",
    "--p": "dimension of the observation",
    "--n": "sample size",
    "--xbar-norm2": "squared norm of the sample mean (spherical model)",
    "--xbar": "sample mean as comma-separated coordinates",
    "--target": "place the observation where the exact p-value equals this value",
    "--mode": "mc or oracle",
    "--b": "replicate chains per cell",
    "--nominal-b": "B assumed for the weights of oracle cells",
    "--seed": "master seed",
    "--methods": "comma-separated p-value methods or all",
    "--ridge": "none, default or six comma-separated ridge weights",
    "--scales-file": "CSV of scales replacing the default plan",
    "--table-in": "bootstrap table CSV to analyze instead of resampling",
    "--out-dir": "output directory",
    "--workers": "worker processes",
    "--log-level": "logging level",
}
COMMAND_FLAGS = {
    "table2": {"--rows": "comma-separated family:n:target rows or all"},
    "coverage": {
        "--trials": "number of simulated observations",
        "--level": "significance level",
        "--method": "p-value method",
    },
}


def build_parser() -> argparse.ArgumentParser:
    """Build the parser with one subcommand per command."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="file of key=value options")
    for flag, help_text in COMMON_FLAGS.items():
        common.add_argument(flag, help=help_text)

    parser = argparse.ArgumentParser(
        prog="regionboot",
        description="Multistep-multiscale bootstrap p-values for the problem of regions.",
    )
    commands = parser.add_subparsers(dest="command", required=True)
    helps = {
        "analyze": "bootstrap table, fits and p-values of one observation",
        "table2": "p-values of the normal and exponential examples in percent",
        "curve": "one-step z-values against 1/tau with the fitted curve",
        "coverage": "rejection frequency of a p-value method on the region boundary",
    }
    for name, help_text in helps.items():
        command = commands.add_parser(name, parents=[common], help=help_text)
        for flag, flag_help in COMMAND_FLAGS.get(name, {}).items():
            command.add_argument(flag, help=flag_help)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    """Layer the parsed flags over the config file and the option defaults."""
    overrides = {
        key: value
        for key, value in vars(args).items()
        if key not in ("command", "config") and value is not None
    }
    return RunConfig.from_sources(args.config, overrides)


def _model(config: RunConfig) -> ModelSpec:
    return build_model(config.model, config.p, config.n)


def _plan(config: RunConfig) -> ScalePlan:
    if config.scales_file is not None:
        return read_scale_plan(config.scales_file, config.b)
    return default_scale_plan(config.n, config.b)


def _seed(config: RunConfig) -> int:
    seed = config.resolve_seed()
    if config.seed is None:
        print(f"master_seed={seed}")
    return seed


def _observation(config: RunConfig, model: ModelSpec) -> np.ndarray:
    if not config.has_observation:
        raise ConfigError("Give the observation with --xbar-norm2, --xbar or --target")
    return resolve_observation(model, config.xbar, config.xbar_norm2, config.target)


def _stream(config: RunConfig) -> Optional[RandomStream]:
    return None if config.mode == "oracle" else RandomStream(_seed(config))


def cmd_analyze(config: RunConfig) -> int:
    """Write the bootstrap table, fit report and p-value report of one observation."""
    model = _model(config)
    if config.table_in is not None:
        table = read_table(config.table_in)
        analysis = analyze_table(model, table, config.methods, config.ridge)
    else:
        analysis = run_analysis(
            model,
            _observation(config, model),
            _plan(config),
            config.methods,
            stream=_stream(config),
            oracle=config.mode == "oracle",
            nominal_b=config.nominal_b,
            ridge=config.ridge,
            workers=config.workers,
        )
    write_analysis(analysis, config.out_dir)
    for report in analysis.reports:
        se = "" if report.se_alpha is None else f" (se {report.se_alpha:.4f})"
        print(f"{report.method.value}: {report.alpha:.4f}{se}")
    return ExitStatus.OK


def cmd_table2(config: RunConfig) -> int:
    """Write the p-values of the example rows in percent."""
    oracle = config.mode == "oracle"
    seed = None if oracle else _seed(config)
    rows = []
    for family, n, target in parse_table2_rows(config.rows):
        plan = _plan(config.model_copy(update={"n": n}))
        rows.append(
            table2_row(family, n, target, plan, oracle, seed, config.nominal_b, config.workers)
        )
    _write(pd.DataFrame(rows), config.out_dir / TABLE2_FILE)
    return ExitStatus.OK


def cmd_curve(config: RunConfig) -> int:
    """Write the one-step z-values and the fitted one-step curve."""
    model = _model(config)
    if config.table_in is not None:
        table = read_table(config.table_in)
    else:
        table = build_table(
            model,
            _observation(config, model),
            restrict_plan(_plan(config), 1),
            _stream(config),
            config.mode == "oracle",
            config.nominal_b,
            config.workers,
        )
    _write(curve_frame(table, fit_onestep(table)), config.out_dir / CURVE_FILE)
    return ExitStatus.OK


def cmd_coverage(config: RunConfig) -> int:
    """Write the rejection frequency of one p-value method at the boundary point."""
    result = run_coverage(
        _model(config),
        config.method,
        config.level,
        config.trials,
        _plan(config),
        _seed(config),
        oracle=config.mode == "oracle",
        nominal_b=config.nominal_b,
        ridge=config.ridge,
        workers=config.workers,
    )
    frame = pd.DataFrame([result.as_row()], columns=COVERAGE_COLUMNS)
    _write(frame, config.out_dir / COVERAGE_FILE)
    print(f"{result.method.value}: {result.frequency:.4f} (se {result.se:.4f})")
    return ExitStatus.OK


COMMANDS: Dict[str, Callable[[RunConfig], int]] = {
    "analyze": cmd_analyze,
    "table2": cmd_table2,
    "curve": cmd_curve,
    "coverage": cmd_coverage,
}


def _write(frame: pd.DataFrame, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    logger.info(f"Wrote {len(frame)} rows to {path}")


def _log_failure(error: ErrorWithStatus) -> None:
    log_destination_map = {
        ExitStatus.CONFIG: logger.error,
        ExitStatus.CAPABILITY: logger.warning,
        ExitStatus.NUMERICAL: logger.error,
    }
    log_destination_map.get(error.status, logger.error)(f"{type(error).__name__}: {error.msg}")


def main(argv: Optional[List[str]] = None) -> int:
    """Run a command and return its exit status."""
    args = build_parser().parse_args(argv)
    level = (args.log_level or "INFO").upper()
    logging.basicConfig(level=level if level in LOG_LEVELS else "INFO", format=LOG_FORMAT)
    try:
        config = config_from_args(args)
        logging.getLogger().setLevel(config.log_level)
        return int(COMMANDS[args.command](config))
    except ErrorWithStatus as error:
        _log_failure(error)
        return int(error.status)


if __name__ == "__main__":
    sys.exit(main())
