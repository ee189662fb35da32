import math

import numpy as np
import pytest

from tdqn.errors import MetricError
from tdqn.metrics import (ANNUALISATION, INDICATORS, daily_returns, drawdown, full_report, position_changes,
                          sharpe_of_values, sharpe_ratio, sortino_ratio, summary_frame, trade_results)
from tdqn.trading_env import Trajectory, run_trajectory
from tests.helpers import drawdown_oracle, sine_series, small_env, trajectory_from

hand = trajectory_from([100, 102, 101, 104, 103, 100, 101, 103, 102, 104, 105], [1, 1, 1, 0, 0, 1, 1, 1, 0, 0])


def test_daily_returns():
    """Verify relative changes and the guard against a zero value.
    """
    np.testing.assert_allclose(daily_returns([100, 110, 99]), [0.1, -0.1])
    np.testing.assert_array_equal(daily_returns([0, 5, 10]), [0.0, 1.0])
    with pytest.raises(MetricError):
        daily_returns([100])


def test_sharpe_ratio():
    """Verify the annualised Sharpe ratio and its undefined cases.
    """
    assert sharpe_ratio([0.01, 0.02, 0.03]) == pytest.approx(2.0 * math.sqrt(252))
    assert sharpe_ratio([0.01, 0.01, 0.01]) is None
    assert sharpe_ratio([0.01]) is None
    assert sharpe_of_values([100, 101]) is None
    assert sharpe_of_values([100, 101, 103]) == pytest.approx(sharpe_ratio(daily_returns([100, 101, 103])))


def test_sortino_ratio():
    """Verify the downside deviation and the case without losing days.
    """
    returns = [0.03, -0.01, 0.02, -0.02]
    expected = ANNUALISATION * 0.005 / math.sqrt((0.01 ** 2 + 0.02 ** 2) / 2)
    assert sortino_ratio(returns) == pytest.approx(expected)
    assert sortino_ratio([0.01, 0.0, 0.02]) is None


def test_drawdown():
    """Verify the maximum drawdown and its duration on known and random series.
    """
    assert drawdown([100, 120, 90, 110, 80]) == (pytest.approx(1 / 3), 3)
    assert drawdown([100, 101, 102]) == (0.0, 0)
    rng = np.random.default_rng(0)
    for _ in range(50):
        values = 100 * np.cumprod(1 + rng.normal(0, 0.02, 40))
        assert drawdown(values)[0] == pytest.approx(drawdown_oracle(values))


def test_trades_of_hand_trajectory():
    """Verify trade segmentation, profitability and the profit-and-loss ratio.
    """
    assert trade_results(hand) == [4.0, -4.0, 2.0, 3.0]
    assert position_changes(hand) == 3
    report = full_report(hand)
    assert report.trades == 4
    assert report.profitability_ratio == 0.75
    assert report.pnl_ratio == pytest.approx(0.75)
    assert report.pnl == 5.0
    assert report.max_drawdown == pytest.approx(4 / 104)
    assert report.max_drawdown_duration == 2
    assert report.annualized_return == pytest.approx(1.05 ** 25.2 - 1)
    assert report.annualized_volatility == pytest.approx(ANNUALISATION * daily_returns(hand.values()).std(ddof=1))


def test_report_edge_cases():
    """Verify the indicators of trajectories without losses or with a wiped out portfolio.
    """
    winner = full_report(trajectory_from([100, 101, 102, 103], [1, 1, 1]))
    assert winner.pnl_ratio == math.inf
    assert winner.sortino is None
    assert winner.to_json_dict()["pnl_ratio"] == "inf"
    ruined = full_report(trajectory_from([100, 50, -10], [1, 0]))
    assert ruined.annualized_return == -1.0
    assert ruined.pnl_ratio == 0.0
    flat = full_report(trajectory_from([100, 100], [1]))
    assert flat.sharpe is None
    assert flat.annualized_volatility is None
    assert flat.profitability_ratio == 0.0
    with pytest.raises(MetricError):
        full_report(Trajectory("EMPTY"))


def test_summary_frame():
    """Verify the long summary with one average row per strategy, undefined values skipped.
    """
    rows = [
        full_report(hand).to_row("AAA", "tdqn"),
        full_report(trajectory_from([100, 100], [1])).to_row("BBB", "tdqn"),
        full_report(trajectory_from([100, 99, 98, 99], [0, 0, 0])).to_row("AAA", "buy-hold"),
    ]
    summary = summary_frame(rows)
    assert list(summary.columns) == ["instrument", "strategy", *INDICATORS]
    assert summary["instrument"].tolist() == ["AAA", "BBB", "AAA", "Average", "Average"]
    averages = summary[summary["instrument"] == "Average"].set_index("strategy")
    assert averages.loc["tdqn", "pnl"] == pytest.approx(2.5)
    assert averages.loc["tdqn", "sharpe"] == pytest.approx(full_report(hand).sharpe)
    with pytest.raises(MetricError):
        summary_frame([])


def brute_sharpe(returns):
    n = len(returns)
    mean = sum(returns) / n
    sd = math.sqrt(sum((r - mean) ** 2 for r in returns) / (n - 1))
    return math.sqrt(252) * mean / sd


def brute_sortino(returns):
    losses = [r for r in returns if r < 0]
    return math.sqrt(252) * (sum(returns) / len(returns)) / math.sqrt(sum(r * r for r in losses) / len(losses))


def test_ratios_match_their_definitions():
    """Verify the Sharpe and Sortino ratios against a direct computation on random returns.
    """
    rng = np.random.default_rng(11)
    for _ in range(100):
        returns = rng.normal(rng.uniform(-0.002, 0.002), rng.uniform(0.005, 0.03), int(rng.integers(5, 300)))
        assert sharpe_ratio(returns) == pytest.approx(brute_sharpe(returns.tolist()), rel=1e-9)
        assert sortino_ratio(returns) == pytest.approx(brute_sortino(returns.tolist()), rel=1e-9)


def test_sharpe_worked_example():
    """Verify a hand computed Sharpe ratio: mean 0.006 over a sample deviation of 0.009618.
    """
    returns = [0.01, -0.005, 0.02, 0.0, 0.005]
    assert np.mean(returns) == pytest.approx(0.006)
    assert np.std(returns, ddof=1) == pytest.approx(0.009618, abs=1e-6)
    assert sharpe_ratio(returns) == pytest.approx(9.90, abs=0.01)


def test_negated_returns_flip_the_sharpe_sign():
    """Verify that negating every return negates the Sharpe ratio.
    """
    rng = np.random.default_rng(12)
    for _ in range(20):
        returns = rng.normal(0.001, 0.01, 60)
        assert sharpe_ratio(-returns) == pytest.approx(-sharpe_ratio(returns), rel=1e-12)


def test_indicators_ignore_the_scale_of_values():
    """Verify that multiplying every portfolio value by a constant only changes the profit and loss.
    """
    rng = np.random.default_rng(13)
    for scale in (4.0, 3.7, 0.01):
        values = 100 * np.cumprod(np.concatenate([[1.0], 1 + rng.normal(0.0005, 0.015, 120)]))
        actions = rng.integers(0, 2, 120)
        base = full_report(trajectory_from(values, actions))
        scaled = full_report(trajectory_from(values * scale, actions))
        assert scaled.pnl == pytest.approx(base.pnl * scale)
        for name in INDICATORS:
            if name != "pnl":
                assert getattr(scaled, name) == pytest.approx(getattr(base, name), rel=1e-9), name


def test_report_of_a_dump_matches_the_report_in_memory(tmp_path):
    """Verify that the indicators recomputed from a trajectory dump equal those of the original run.
    """
    trajectory, _ = run_trajectory(sine_series(200, amplitude=0.15, period=13), lambda o: int(o.index % 7 < 4),
                                   small_env(cost_rate=0.002))
    trajectory.write_csv(tmp_path / "trajectory.csv")
    assert full_report(Trajectory.read_csv(tmp_path / "trajectory.csv")) == full_report(trajectory)
    hand.write_csv(tmp_path / "hand.csv")
    assert full_report(Trajectory.read_csv(tmp_path / "hand.csv")) == full_report(hand)
