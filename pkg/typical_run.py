from datetime import date

from tdqn.agent import evaluate, train
from tdqn.benchmarks import make_policy
from tdqn.market_data import split_series, synthetic_series
from tdqn.metrics import full_report
from tdqn.settings import EnvConfig, Hyperparams, NetworkSpec, StrategySpec
from tdqn.trading_env import run_trajectory

series = synthetic_series("SINE", length=1500, period=20, amplitude=0.1, trend=0.0002)
split = split_series(series, train_end=date(2016, 12, 30), validation_fraction=0.2)

env = EnvConfig(tau=30, filter_window=5, cost_rate=0.001)
network = NetworkSpec(input_width=env.observation_width, hidden_widths=(128, 128))
hyperparams = Hyperparams(episodes=10, batch_size=32, augment=False)

run = train(split, env, network, hyperparams, seed=0)
trajectory, report = evaluate(run.best_params, split.test, env, run.scaler)
print(f"TDQN (best episode {run.best_episode}): Sharpe {report.sharpe}, P&L {report.pnl:.2f}")

for kind in ("buy-hold", "sell-hold", "trend-following", "mean-reversion"):
    benchmark, _ = run_trajectory(split.test, make_policy(StrategySpec(kind=kind)), env, scaler=run.scaler)
    result = full_report(benchmark)
    print(f"{kind}: Sharpe {result.sharpe}, P&L {result.pnl:.2f}")
