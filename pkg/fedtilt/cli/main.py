import argparse
import os
import sys
import time
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from functools import partial
from pathlib import Path
from typing import Any, Final

from loguru import logger

from fedtilt.baselines import run_baseline
from fedtilt.cli.output import format_csv, write_atomic, write_rounds_csv, write_summary
from fedtilt.cli.verify import render_report, run_checks
from fedtilt.config import TOY_PRESETS, ConfigError, ExperimentConfig, load_config
from fedtilt.fed_protocol import RunResult, run
from fedtilt.metrics import ROUND_COLUMNS

EXIT_OK: Final = 0
EXIT_CONFIG: Final = 1
EXIT_RUNTIME: Final = 2
EXIT_VERIFY: Final = 3

THREADS_ENV: Final = "FEDTILT_THREADS"
SWEEP_COLUMNS: Final = ("lambda", "tau", *ROUND_COLUMNS)


def _configure_logging(verbose: bool) -> None:
    logger.remove()
    logger.enable("fedtilt")
    logger.add(sys.stderr, level="DEBUG" if verbose else "INFO", format="{time:HH:mm:ss} | {level: <7} | {message}")


def _worker_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return threads


def _parse_grid(raw: str, name: str) -> list[float]:
    try:
        grid = [float(item) for item in raw.split(",") if item.strip()]
    except ValueError:
        raise ConfigError(f"--{name}-grid must be a comma separated list of numbers, got {raw!r}") from None
    if not grid:
        raise ConfigError(f"--{name}-grid is empty")
    return grid


def _experiment(args: argparse.Namespace, base: Mapping[str, Any] | None = None) -> ExperimentConfig:
    values = load_config(args.config, args.set, base)
    if args.seed is not None:
        values["seed"] = args.seed
    if args.baseline is not None:
        values["method"] = args.baseline
    return ExperimentConfig.from_config(values)


def execute(experiment: ExperimentConfig, workers: int = 1) -> RunResult:
    """Build the dataset and run FedTilt or the configured baseline on it."""
    dataset = experiment.build_dataset()
    spec = experiment.model_spec(dataset)
    cfg = experiment.run_config(workers)
    outliers = experiment.outlier_spec()
    baseline = experiment.baseline()
    logger.info(
        f"Running {experiment['method']} on {experiment['dataset']} data: {dataset.num_clients} clients, "
        f"{cfg.global_rounds} rounds, seed {cfg.seed}"
    )
    if baseline is None:
        return run(dataset, spec, cfg, outliers)
    return run_baseline(baseline, dataset, spec, cfg, outliers)


def _run_and_write(experiment: ExperimentConfig, out: Path) -> int:
    start = time.perf_counter()
    result = execute(experiment, _worker_threads())
    write_rounds_csv(out / "rounds.csv", result.records)
    write_summary(
        out / "summary.json",
        result.records,
        experiment.values,
        experiment.config_hash,
        wall_time_seconds=time.perf_counter() - start,
    )
    logger.info(f"Wrote {len(result.records)} rounds to {out / 'rounds.csv'}")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    return _run_and_write(_experiment(args), Path(args.out))


def cmd_toy(args: argparse.Namespace) -> int:
    base = {"dataset": "toy", "toy_experiment": args.experiment, **TOY_PRESETS[args.experiment]}
    return _run_and_write(_experiment(args, base), Path(args.out))


def _sweep_cell(experiment: ExperimentConfig, out: Path) -> dict[str, Any]:
    result = execute(experiment)
    if not result.records:
        raise ValueError("A sweep cell needs at least one global round")
    cell = f"lambda={experiment['lambda']:g}_tau={experiment['tau']:g}"
    write_rounds_csv(out / "cells" / cell / "rounds.csv", result.records)
    return {"lambda": experiment["lambda"], "tau": experiment["tau"], **result.records[-1].as_row()}


def cmd_sweep(args: argparse.Namespace) -> int:
    base = _experiment(args)
    lambdas = _parse_grid(args.lambda_grid, "lambda") if args.lambda_grid else [base["lambda"]]
    taus = _parse_grid(args.tau_grid, "tau") if args.tau_grid else [base["tau"]]
    cells = [
        ExperimentConfig.from_config({**base.values, "lambda": lam, "tau": tau}) for lam in lambdas for tau in taus
    ]

    out = Path(args.out)
    with ThreadPoolExecutor(max_workers=_worker_threads()) as executor:
        rows = list(executor.map(partial(_sweep_cell, out=out), cells))
    write_atomic(out / "sweep.csv", format_csv(SWEEP_COLUMNS, rows))
    logger.info(f"Wrote {len(rows)} sweep cells to {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:  # noqa: ARG001
    results = run_checks()
    sys.stdout.write(render_report(results))
    failed = [f"{result.category}/{result.name}" for result in results if not result.passed]
    if failed:
        logger.error(f"Verification failed: {', '.join(failed)}")
        return EXIT_VERIFY
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    experiment_flags = argparse.ArgumentParser(add_help=False)
    experiment_flags.add_argument("--config", help="Flat TOML config file")
    experiment_flags.add_argument("--seed", type=int, help="Overrides the seed of the config")
    experiment_flags.add_argument("--out", default="out", help="Output directory (default: out)")
    experiment_flags.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="Override a config key, repeatable"
    )
    experiment_flags.add_argument("--baseline", choices=("fedavg", "fedprox", "ditto"), help="Run a baseline method")

    parser = argparse.ArgumentParser(prog="fedtilt", description="Federated learning with two-level tilted losses")
    parser.add_argument("--verbose", action="store_true", help="Log every client update")
    commands = parser.add_subparsers(dest="command", required=True)

    run_parser = commands.add_parser("run", parents=[experiment_flags], help="Run one experiment")
    run_parser.set_defaults(handler=cmd_run)

    sweep_parser = commands.add_parser("sweep", parents=[experiment_flags], help="Run a lambda x tau grid")
    sweep_parser.add_argument("--lambda-grid", help="Comma separated class-level tilts")
    sweep_parser.add_argument("--tau-grid", help="Comma separated client-level tilts")
    sweep_parser.set_defaults(handler=cmd_sweep)

    toy_parser = commands.add_parser("toy", parents=[experiment_flags], help="Run one of the Gaussian toy experiments")
    toy_parser.add_argument("experiment", type=int, choices=sorted(TOY_PRESETS))
    toy_parser.set_defaults(handler=cmd_toy)

    verify_parser = commands.add_parser("verify", help="Run the gradient, reduction and convergence checks")
    verify_parser.set_defaults(handler=cmd_verify)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose)
    try:
        return args.handler(args)
    except ConfigError as error:
        logger.error(str(error))
        return EXIT_CONFIG
    except Exception as error:  # noqa: BLE001
        logger.error(f"{type(error).__name__}: {error}")
        return EXIT_RUNTIME
