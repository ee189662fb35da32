import math
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from tdqn.errors import MetricError
from tdqn.trading_env import Trajectory

TRADING_DAYS = 252
ANNUALISATION = math.sqrt(TRADING_DAYS)


@dataclass(frozen=True)
class PerformanceReport:
    """The quantitative performance indicators of one trajectory.

    Undefined indicators are None; a profit-and-loss ratio without losing trades is +inf.
    """

    sharpe: Optional[float]
    pnl: float
    annualized_return: float
    annualized_volatility: Optional[float]
    profitability_ratio: Optional[float]
    pnl_ratio: Optional[float]
    sortino: Optional[float]
    max_drawdown: float
    max_drawdown_duration: int
    trades: int = 0

    def to_json_dict(self) -> Dict[str, Any]:
        data = dict()
        for key, value in asdict(self).items():
            if isinstance(value, float) and math.isinf(value):
                value = "inf" if value > 0 else "-inf"
            data[key] = value
        return data

    def to_row(self, instrument: str, strategy: str) -> Dict[str, Any]:
        """One line of the testbench summary; undefined indicators become NaN."""
        row = {"instrument": instrument, "strategy": strategy}
        for key, value in asdict(self).items():
            row[key] = np.nan if value is None else value
        return row


INDICATORS = tuple(f.name for f in fields(PerformanceReport))


def daily_returns(values: Sequence[float]) -> np.ndarray:
    """Relative change of each portfolio value over the previous one.

    Args:
        values (Sequence[float]): Portfolio values, oldest first.

    Returns:
        np.ndarray: n-1 returns; a zero previous value yields a zero return.
    """
    values = np.asarray(values, dtype="float64")
    if values.ndim != 1 or len(values) < 2:
        raise MetricError(f"need at least 2 values to compute returns, got {values.size}")
    previous = values[:-1]
    returns = np.zeros(len(values) - 1)
    np.divide(values[1:] - previous, previous, out=returns, where=previous != 0)
    return returns


def sharpe_ratio(returns: Sequence[float]) -> Optional[float]:
    """Annualised Sharpe ratio with a negligible risk-free rate.

    Args:
        returns (Sequence[float]): Daily returns.

    Returns:
        float, optional: sqrt(252) * mean / sample sd, or None when fewer than two returns
        are given or all of them are equal.
    """
    returns = np.asarray(returns, dtype="float64")
    if len(returns) < 2 or np.ptp(returns) == 0:
        return None
    return float(ANNUALISATION * returns.mean() / returns.std(ddof=1))


def sortino_ratio(returns: Sequence[float]) -> Optional[float]:
    """Annualised Sortino ratio: mean return over the root-mean-square of the negative returns.

    Args:
        returns (Sequence[float]): Daily returns.

    Returns:
        float, optional: The ratio, or None without any negative return.
    """
    returns = np.asarray(returns, dtype="float64")
    negative = returns[returns < 0]
    if not len(negative):
        return None
    return float(ANNUALISATION * returns.mean() / np.sqrt(np.mean(negative ** 2)))


def drawdown(values: Sequence[float]) -> Tuple[float, int]:
    """Largest relative fall from a running peak and its length in trading days.

    Args:
        values (Sequence[float]): Portfolio values.

    Returns:
        tuple (float, int): Maximum drawdown and the number of days from its peak to its trough.
    """
    values = np.asarray(values, dtype="float64")
    if len(values) < 2:
        return 0.0, 0
    peaks = np.maximum.accumulate(values)
    losses = np.zeros_like(values)
    np.divide(peaks - values, peaks, out=losses, where=peaks > 0)
    trough = int(np.argmax(losses))
    if losses[trough] <= 0:
        return 0.0, 0
    peak = int(np.flatnonzero(values[:trough + 1] == peaks[trough])[0])
    return float(losses[trough]), trough - peak


def sharpe_of_values(values: Sequence[float]) -> Optional[float]:
    if len(values) < 3:
        return None
    return sharpe_ratio(daily_returns(values))


def position_changes(trajectory: Trajectory) -> int:
    """Number of steps whose position differs from the previous step's."""
    actions = np.array([r.action for r in trajectory.records])
    return int(np.count_nonzero(actions[1:] != actions[:-1])) if len(actions) else 0


def trade_results(trajectory: Trajectory) -> List[float]:
    """Portfolio value change over each trade, a trade being a run of steps with the same position."""
    values = trajectory.values()
    actions = [r.action for r in trajectory.records]
    boundaries = [0] + [k for k in range(1, len(actions)) if actions[k] != actions[k - 1]] + [len(actions)]
    return [float(values[end] - values[start]) for start, end in zip(boundaries[:-1], boundaries[1:])]


def count_trades(trajectory: Trajectory) -> int:
    return len(trade_results(trajectory))


def _pnl_ratio(results: List[float]) -> Optional[float]:
    wins = [r for r in results if r > 0]
    losses = [-r for r in results if r < 0]
    if not losses:
        return math.inf if wins else None
    if not wins:
        return 0.0
    return float(np.mean(wins) / np.mean(losses))


def full_report(trajectory: Trajectory) -> PerformanceReport:
    """Compute every performance indicator of a trajectory.

    Args:
        trajectory (Trajectory): A non-empty trajectory.

    Returns:
        PerformanceReport: The indicators.
    """
    if not len(trajectory):
        raise MetricError(f"{trajectory.instrument}: empty trajectory")
    values = trajectory.values()
    returns = daily_returns(values)
    results = trade_results(trajectory)
    winners = sum(1 for r in results if r > 0)
    if values[-1] <= 0 or values[0] <= 0:
        annualized = -1.0
    else:
        annualized = float((values[-1] / values[0]) ** (TRADING_DAYS / len(returns)) - 1.0)
    volatility = float(ANNUALISATION * returns.std(ddof=1)) if len(returns) >= 2 else None
    max_drawdown, duration = drawdown(values)
    return PerformanceReport(
        sharpe=sharpe_ratio(returns),
        pnl=float(values[-1] - values[0]),
        annualized_return=annualized,
        annualized_volatility=volatility,
        profitability_ratio=winners / len(results) if results else None,
        pnl_ratio=_pnl_ratio(results),
        sortino=sortino_ratio(returns),
        max_drawdown=max_drawdown,
        max_drawdown_duration=duration,
        trades=len(results),
    )


def summary_frame(rows: List[Dict[str, Any]]) -> pd.DataFrame:
    """Testbench summary: one row per (instrument, strategy) plus an "Average" row per strategy.

    Undefined indicators (NaN) are skipped by the averages; an infinite value propagates.

    Args:
        rows (List[Dict[str, Any]]): Rows built with `PerformanceReport.to_row`.

    Returns:
        pd.DataFrame: The summary, averages last.
    """
    if not rows:
        raise MetricError("no results to summarise")
    frame = pd.DataFrame(rows, columns=["instrument", "strategy", *INDICATORS])
    averages = frame.groupby("strategy", sort=False)[list(INDICATORS)].mean().reset_index()
    averages.insert(0, "instrument", "Average")
    return pd.concat([frame, averages], ignore_index=True)
