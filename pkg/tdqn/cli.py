import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import date
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

import tdqn
from tdqn.agent import evaluate, expected_performance, load_agent, train
from tdqn.benchmarks import make_policy
from tdqn.errors import ConfigError, DataError, TdqnError
from tdqn.market_data import (DatasetSplit, HttpSource, OhlcvSeries, load_series, load_testbench, series_fingerprint,
                              split_series, synthetic_series, write_series)
from tdqn.metrics import full_report, summary_frame
from tdqn.plotting import plot_cost_sweep, plot_expected_performance, plot_trajectory
from tdqn.preprocessing import FeatureScaler, compute_features
from tdqn.settings import RunConfig, StrategyKind, StrategySpec, load_config
from tdqn.trading_env import Trajectory, run_trajectory

logger = logging.getLogger("tdqn")

DEFAULT_RUNS = 50
DEFAULT_COSTS = (0.0, 0.001, 0.002)
DEFAULT_TESTBENCH = Path("configs") / "testbench.yaml"


def _costs(text: str) -> List[float]:
    try:
        return [float(c) for c in text.split(",") if c.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML configuration file")
    common.add_argument("--ticker", action="append", help="instrument to use (repeatable or comma separated)")
    common.add_argument("--data-dir", help="directory of <ticker>.csv files (default: $TDQN_DATA_DIR or ./data)")
    common.add_argument("--source", choices=["csv", "http"], help="where market data is read from")
    common.add_argument("--synthetic", action="store_true", help="trade a sinusoidal series instead of market data")
    common.add_argument("--start", type=date.fromisoformat, help="first date (YYYY-MM-DD)")
    common.add_argument("--end", type=date.fromisoformat, help="last date (YYYY-MM-DD)")
    common.add_argument("--train-end", type=date.fromisoformat, help="last date of the training set")
    common.add_argument("--validation-fraction", type=float, help="share of training bars used for validation")
    common.add_argument("--cost-rate", type=float, help="trading costs as a fraction of traded money")
    common.add_argument("--epsilon-bound", type=float, help="assumed maximum relative daily price move")
    common.add_argument("--episodes", type=int, help="training episodes")
    common.add_argument("--gamma", type=float, help="discount factor")
    common.add_argument("--seed", type=int, help="seed of the (first) run")
    common.add_argument("--output", help="output directory")
    common.add_argument("--workers", type=int, help="worker processes for fan-out commands")
    common.add_argument("--no-plots", action="store_true", help="do not write figures")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    verbosity.add_argument("--debug", action="store_true", help="log debug messages")

    parser = argparse.ArgumentParser(prog="tdqn", description="Deep reinforcement learning for algorithmic trading.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {tdqn.__version__}")
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("fetch", parents=[common], help="download market data into the data directory")
    train_command = commands.add_parser("train", parents=[common], help="train one agent per ticker")
    train_command.add_argument("--resume", type=Path, help="resume.npz of an earlier run to continue")
    backtest = commands.add_parser("backtest", parents=[common], help="evaluate a strategy on the test set")
    backtest.add_argument("--strategy", choices=[k.value for k in StrategyKind], default=StrategyKind.BUY_HOLD.value)
    backtest.add_argument("--checkpoint", type=Path, help="checkpoint of the tdqn strategy")
    expected = commands.add_parser("expected", parents=[common], help="multi-seed expected performance")
    expected.add_argument("--runs", type=int, help=f"number of seeded runs (default {DEFAULT_RUNS})")
    testbench = commands.add_parser("testbench", parents=[common], help="every instrument against every strategy")
    testbench.add_argument("--testbench", type=Path, help=f"testbench file (default {DEFAULT_TESTBENCH})")
    testbench.add_argument("--strategy", action="append", choices=[k.value for k in StrategyKind],
                           help="strategy to include (repeatable; default from the configuration)")
    sweep = commands.add_parser("cost-sweep", parents=[common], help="train and test across trading costs")
    sweep.add_argument("--costs", type=_costs, default=list(DEFAULT_COSTS), help="comma separated cost rates")
    return parser


def setup_logging(quiet: bool = False, debug: bool = False) -> None:
    level = logging.WARNING if quiet else logging.DEBUG if debug else logging.INFO
    handler = RichHandler(console=Console(stderr=True), show_path=False, rich_tracebacks=debug)
    logging.basicConfig(level=level, format="%(message)s", datefmt="[%X]", handlers=[handler], force=True)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Built-in defaults, overridden by the configuration file, overridden by flags."""
    config = load_config(args.config)
    tickers = ",".join(args.ticker) if args.ticker else None
    config.override("data", tickers=tickers, data_dir=args.data_dir, source="synthetic" if args.synthetic else args.source,
                    start=args.start, end=args.end, train_end=args.train_end,
                    validation_fraction=args.validation_fraction)
    config.override("env", cost_rate=args.cost_rate, epsilon_bound=args.epsilon_bound)
    config.override("agent", episodes=args.episodes, gamma=args.gamma)
    if args.output is not None:
        config.output = args.output
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError([f"workers: expected a positive integer, got {args.workers}"])
        config.workers = args.workers
    first = args.seed if args.seed is not None else config.seeds[0]
    runs = getattr(args, "runs", None)
    if runs is not None:
        if runs < 2:
            raise ConfigError([f"runs: at least 2 runs are needed, got {runs}"])
        config.seeds = [first + i for i in range(runs)]
    elif args.seed is not None:
        config.seeds = [args.seed]
    return config


def load_instrument(config: RunConfig, ticker: str) -> OhlcvSeries:
    data = config.data
    match data.source:
        case "synthetic":
            length = len(pd.bdate_range(data.start, data.end))
            return synthetic_series(ticker, length=length, start=data.start)
        case "http":
            source = HttpSource(data.url_template, data.timeout, data.retries)
            return load_series(source, ticker, data.start, data.end)
        case _:
            return load_series(data.resolved_data_dir() / f"{ticker}.csv", ticker, data.start, data.end)


def load_split(config: RunConfig, ticker: str) -> DatasetSplit:
    series = load_instrument(config, ticker)
    return split_series(series, config.data.train_end, config.data.validation_fraction)


def tickers_of(config: RunConfig) -> List[str]:
    if config.data.tickers:
        return list(config.data.tickers)
    if config.data.source == "synthetic":
        return ["SINE"]
    raise ConfigError(["data.tickers: at least one ticker is required (--ticker)"])


def write_json(path: Path, data: Dict[str, Any]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def write_manifest(directory: Path, command: str, config: RunConfig, **extra) -> Path:
    manifest = {"command": command, "version": tdqn.__version__, "config": config.to_dict()}
    manifest.update(extra)
    return write_json(directory / "manifest.json", manifest)


def write_results(directory: Path, trajectory: Trajectory, plots: bool, title: str) -> Dict[str, Any]:
    report = full_report(trajectory)
    write_json(directory / "report.json", report.to_json_dict())
    trajectory.write_csv(directory / "trajectory.csv")
    if plots:
        plot_trajectory(trajectory, directory / "trajectory.png", title)
    logger.info("%s: Sharpe %s, P&L %.2f, max drawdown %.1f%%", title,
                "n/a" if report.sharpe is None else f"{report.sharpe:.3f}", report.pnl, 100 * report.max_drawdown)
    return report.to_json_dict()


def strategy_spec(config: RunConfig, kind: str) -> StrategySpec:
    for spec in config.strategies:
        if spec.kind == kind:
            return spec
    return StrategySpec(kind=kind)


def run_fetch(args: argparse.Namespace, config: RunConfig) -> None:
    if config.data.source != "http":
        raise ConfigError(["fetch needs data.source: http and a data.url_template"])
    directory = config.data.resolved_data_dir()
    for ticker in tickers_of(config):
        series = load_instrument(config, ticker)
        path = write_series(series, directory / f"{ticker}.csv")
        logger.info("%s: %d bars written to %s", ticker, len(series), path)


def _train_and_test(config: RunConfig, split: DatasetSplit, seed: int, directory: Path, plots: bool,
                    resume: Optional[Path] = None) -> Trajectory:
    env = config.env
    run = train(split, env, config.network, config.agent, seed, config.augmentation, resume)
    run.save(directory)
    trajectory, _ = evaluate(run.best_params, split.test, env, run.scaler)
    results = write_results(directory, trajectory, plots, f"{split.test.instrument} TDQN (C={env.cost_rate:g})")
    write_manifest(directory, "train", config, run=run.to_manifest(), report=results)
    return trajectory


def run_train(args: argparse.Namespace, config: RunConfig) -> None:
    seed = config.seeds[0]
    tickers = tickers_of(config)
    if args.resume is not None and len(tickers) > 1:
        raise ConfigError(["--resume continues the run of a single ticker"])
    for ticker in tickers:
        split = load_split(config, ticker)
        _train_and_test(config, split, seed, Path(config.output) / f"train-{ticker}-seed{seed}", not args.no_plots,
                        args.resume)


def run_backtest(args: argparse.Namespace, config: RunConfig) -> None:
    spec = strategy_spec(config, args.strategy)
    params, scaler = None, None
    if spec.strategy is StrategyKind.TDQN:
        if args.checkpoint is None:
            raise ConfigError(["backtest --strategy tdqn needs --checkpoint"])
        params, scaler = load_agent(args.checkpoint)
    for ticker in tickers_of(config):
        split = load_split(config, ticker)
        fitted = scaler or FeatureScaler.fit(compute_features(split.train, config.env.filter_window))
        trajectory, _ = run_trajectory(split.test, make_policy(spec, params), config.env, scaler=fitted)
        directory = Path(config.output) / f"backtest-{ticker}-{spec.kind}"
        results = write_results(directory, trajectory, not args.no_plots, f"{ticker} {spec.kind}")
        write_manifest(directory, "backtest", config, strategy=spec.to_dict(), report=results,
                       checkpoint=str(args.checkpoint) if args.checkpoint else None,
                       fingerprints={"test": series_fingerprint(split.test)})


def run_expected(args: argparse.Namespace, config: RunConfig) -> None:
    seeds = config.seeds
    if len(seeds) < 2:
        seeds = [seeds[0] + i for i in range(DEFAULT_RUNS)]
    for ticker in tickers_of(config):
        split = load_split(config, ticker)
        outcome = expected_performance(split, config.env, config.network, config.agent, seeds, config.workers,
                                       config.augmentation)
        directory = Path(config.output) / f"expected-{ticker}-seed{seeds[0]}x{len(seeds)}"
        outcome.write_csv(directory / "curves.csv")
        if not args.no_plots:
            plot_expected_performance(outcome.curves, directory / "curves.png", f"{ticker} expected performance")
        write_manifest(directory, "expected", config, seeds=seeds, failures={str(k): v for k, v in outcome.failures.items()},
                       runs=[run.to_manifest(checkpoint=None) for run in outcome.runs])


def _testbench_instrument(job: Tuple) -> Tuple[str, List[Dict[str, Any]], Optional[str]]:
    config, ticker, specs = job
    try:
        split = load_split(config, ticker)
        scaler = FeatureScaler.fit(compute_features(split.train, config.env.filter_window))
        rows = []
        for spec in specs:
            params = None
            if spec.strategy is StrategyKind.TDQN:
                run = train(split, config.env, config.network, config.agent, config.seeds[0], config.augmentation)
                params, scaler_used = run.best_params, run.scaler
            else:
                scaler_used = scaler
            trajectory, _ = run_trajectory(split.test, make_policy(spec, params), config.env, scaler=scaler_used)
            rows.append(full_report(trajectory).to_row(ticker, spec.kind))
        return ticker, rows, None
    except TdqnError as error:
        return ticker, [], f"{type(error).__name__}: {error}"


def _print_summary(summary: pd.DataFrame) -> None:
    table = Table(title="Testbench")
    columns = ["instrument", "strategy", "sharpe", "pnl", "profitability_ratio", "max_drawdown"]
    for column in columns:
        table.add_column(column.replace("_", " "), justify="left" if column in columns[:2] else "right")
    for row in summary[columns].itertuples(index=False):
        table.add_row(*[value if isinstance(value, str) else f"{value:.3f}" for value in row])
    Console().print(table)


def run_testbench(args: argparse.Namespace, config: RunConfig) -> None:
    if config.data.tickers:
        tickers = list(config.data.tickers)
    else:
        tickers = [entry.ticker for entry in load_testbench(args.testbench or config.data.testbench or DEFAULT_TESTBENCH)]
    specs = [strategy_spec(config, kind) for kind in args.strategy] if args.strategy else config.strategies
    jobs = [(config, ticker, specs) for ticker in tickers]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            outcomes = list(pool.map(_testbench_instrument, jobs))
    else:
        outcomes = [_testbench_instrument(job) for job in jobs]
    rows = []
    failures = dict()
    for ticker, ticker_rows, message in outcomes:
        if message is not None:
            logger.warning("%s skipped: %s", ticker, message)
            failures[ticker] = message
        rows.extend(ticker_rows)
    if not rows:
        raise DataError("no instrument of the testbench could be evaluated")
    summary = summary_frame(rows)
    directory = Path(config.output) / "testbench"
    directory.mkdir(parents=True, exist_ok=True)
    summary.to_csv(directory / "summary.csv", index=False, lineterminator="\n")
    write_manifest(directory, "testbench", config, instruments=tickers, strategies=[s.to_dict() for s in specs],
                   failures=failures)
    if not args.quiet:
        _print_summary(summary)


def run_cost_sweep(args: argparse.Namespace, config: RunConfig) -> None:
    if not args.costs:
        raise ConfigError(["--costs: at least one cost rate is required"])
    seed = config.seeds[0]
    for ticker in tickers_of(config):
        split = load_split(config, ticker)
        base = Path(config.output) / f"cost-sweep-{ticker}-seed{seed}"
        trajectories = dict()
        for cost in args.costs:
            swept = config.overridden("env", cost_rate=cost)
            trajectories[cost] = _train_and_test(swept, split, seed, base / f"cost-{cost:g}", not args.no_plots)
        if not args.no_plots:
            plot_cost_sweep(trajectories, base / "cost_sweep.png", f"{ticker} impact of the trading costs")


COMMANDS = {
    "fetch": run_fetch,
    "train": run_train,
    "backtest": run_backtest,
    "expected": run_expected,
    "testbench": run_testbench,
    "cost-sweep": run_cost_sweep,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point of the tdqn command.

    Args:
        argv (Sequence[str], optional): Arguments without the program name. Defaults to sys.argv[1:].

    Returns:
        int: 0 on success, 2 when a run could not be carried out.
    """
    args = build_parser().parse_args(argv)
    setup_logging(args.quiet, args.debug)
    try:
        config = resolve_config(args)
        config.validate()
        COMMANDS[args.command](args, config)
    except ConfigError as error:
        for violation in error.violations:
            logger.error("configuration: %s", violation)
        return 2
    except TdqnError as error:
        logger.error("%s: %s", type(error).__name__, error)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
