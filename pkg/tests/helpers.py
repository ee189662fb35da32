from datetime import date
from typing import Callable, List, Sequence

import numpy as np

from tdqn.market_data import OhlcvSeries, synthetic_series
from tdqn.metrics import daily_returns
from tdqn.neural_net import NetworkParams, forward_with_cache, huber_loss, init_xavier, l2_penalty
from tdqn.settings import EnvConfig, Hyperparams, NetworkSpec
from tdqn.trading_env import StepRecord, Trajectory


def small_env(tau: int = 2, filter_window: int = 1, **values) -> EnvConfig:
    """An environment with a short history so that tiny fixtures produce many steps.

    Args:
        tau (int): History length. Defaults to 2.
        filter_window (int): Trailing average width. Defaults to 1.

    Returns:
        EnvConfig: The configuration.
    """
    return EnvConfig(tau=tau, filter_window=filter_window, **values)


def small_network(env: EnvConfig, hidden: Sequence[int] = (8, 8), **values) -> NetworkSpec:
    return NetworkSpec(input_width=env.observation_width, hidden_widths=tuple(hidden), **values)


def small_hyperparams(**values) -> Hyperparams:
    defaults = dict(batch_size=8, episodes=2, epsilon_decay_steps=200, target_sync=20, replay_capacity=5000,
                    learning_rate=1e-3, augment=False, early_stopping=False)
    defaults.update(values)
    return Hyperparams(**defaults)


def closes_series(closes: Sequence[float], instrument: str = "TEST", start: date = date(2012, 1, 2)) -> OhlcvSeries:
    return OhlcvSeries.from_closes(instrument, closes, start=start)


def rising_series(length: int = 60, first: float = 100.0, last: float = 150.0) -> OhlcvSeries:
    return closes_series(np.linspace(first, last, length), instrument="RISE")


def sine_series(length: int = 300, **values) -> OhlcvSeries:
    return synthetic_series("SINE", length=length, **values)


def feasible_mask(cash, shares, price, quantity, cost_rate, epsilon) -> np.ndarray:
    """Brute-force feasibility of traded quantities: the cash stays non-negative after trading and
    still covers buying back a short position after a worst-case price rise, costs included.

    Args:
        cash: Cash before trading (scalar or array).
        shares: Shares held before trading.
        price: Trade price.
        quantity: Candidate traded quantities.
        cost_rate: Trading cost rate.
        epsilon: Assumed maximum relative price move.

    Returns:
        np.ndarray: True where the quantity is feasible.
    """
    quantity = np.asarray(quantity, dtype="float64")
    cash_after = cash - quantity * price - cost_rate * np.abs(quantity) * price
    shares_after = shares + quantity
    buy_back = -shares_after * price * (1.0 + epsilon) * (1.0 + cost_rate)
    return (cash_after >= 0) & (cash_after >= buy_back)


def brute_force_feasible(cash: float, shares: int, price: float, cost_rate: float, epsilon: float,
                         search: int = 5000) -> List[int]:
    """Every feasible integer quantity in [-search, search]."""
    candidates = np.arange(-search, search + 1)
    return candidates[feasible_mask(cash, shares, price, candidates, cost_rate, epsilon)].tolist()


def numerical_gradient(params: NetworkParams, name: str, loss: Callable[[], float], step: float = 1e-5) -> np.ndarray:
    """Central finite differences of `loss` with respect to one tensor, perturbed in place.

    Args:
        params (NetworkParams): The parameters.
        name (str): Tensor to differentiate.
        loss (Callable[[], float]): Evaluates the loss at the current parameters.
        step (float): Perturbation. Defaults to 1e-5.

    Returns:
        np.ndarray: The gradient estimate, shaped like the tensor.
    """
    tensor = params[name]
    gradient = np.zeros_like(tensor)
    for index in np.ndindex(tensor.shape):
        original = tensor[index]
        tensor[index] = original + step
        upper = loss()
        tensor[index] = original - step
        lower = loss()
        tensor[index] = original
        gradient[index] = (upper - lower) / (2.0 * step)
    return gradient


def batch_loss(params: NetworkParams, inputs: np.ndarray, actions: np.ndarray, targets: np.ndarray,
               mode: str = "eval") -> Callable[[], float]:
    """Mean Huber loss on the taken actions plus the L2 penalty, without dropout or statistics updates."""
    rows = np.arange(len(actions))

    def evaluate() -> float:
        q, _ = forward_with_cache(params, inputs, mode, track_statistics=False)
        losses, _ = huber_loss(q[rows, actions], targets)
        return float(np.mean(losses)) + l2_penalty(params)

    return evaluate


def random_network(spec: NetworkSpec, seed: int) -> NetworkParams:
    """Xavier parameters with non-trivial biases and batch-norm tensors."""
    rng = np.random.default_rng(seed)
    params = init_xavier(spec, rng)
    for name, tensor in params.tensors.items():
        if name.startswith(("b", "beta", "mean")):
            tensor[:] = rng.normal(0.0, 0.3, tensor.shape)
        elif name.startswith("gamma"):
            tensor[:] = rng.uniform(0.5, 1.5, tensor.shape)
        elif name.startswith("var"):
            tensor[:] = rng.uniform(0.5, 2.0, tensor.shape)
    return params


def trajectory_from(values: Sequence[float], actions: Sequence[int], instrument: str = "HAND") -> Trajectory:
    """A trajectory whose portfolio values and positions are given directly.

    Args:
        values (Sequence[float]): len(actions) + 1 portfolio values.
        actions (Sequence[int]): Position held after each step.

    Returns:
        Trajectory: Records with the values filled in; prices and holdings are placeholders.
    """
    assert len(values) == len(actions) + 1
    returns = daily_returns(values)
    records = []
    for k, action in enumerate(actions):
        records.append(StepRecord(date.fromordinal(date(2018, 1, 1).toordinal() + k), 100.0, int(action), 0,
                                  float(values[k + 1]), 0, float(values[k]), float(values[k + 1]),
                                  float(returns[k])))
    return Trajectory(instrument, records)


def drawdown_oracle(values: Sequence[float]) -> float:
    """Largest (v_i - v_j) / v_i over all pairs i < j."""
    best = 0.0
    for i in range(len(values)):
        for j in range(i + 1, len(values)):
            best = max(best, (values[i] - values[j]) / values[i])
    return best
