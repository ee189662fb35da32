from collections import deque
from typing import Callable, Dict, Optional, Sequence

import numpy as np
import pandas as pd

from tdqn.agent import GreedyPolicy
from tdqn.errors import ConfigError
from tdqn.neural_net import NetworkParams
from tdqn.settings import StrategyKind, StrategySpec
from tdqn.trading_env import Observation, Policy, Position


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    """Simple moving average; the first window-1 entries are NaN."""
    return pd.Series(values, dtype="float64").rolling(window).mean().to_numpy()


class PassivePolicy:
    """Holds one position over the whole trading horizon."""

    def __init__(self, position: Position):
        self.position = position

    def __call__(self, observation: Observation) -> int:
        return int(self.position)


def passive_policy(kind: StrategyKind) -> PassivePolicy:
    match StrategyKind(kind):
        case StrategyKind.BUY_HOLD:
            return PassivePolicy(Position.LONG)
        case StrategyKind.SELL_HOLD:
            return PassivePolicy(Position.SHORT)
        case other:
            raise ConfigError([f"{other.value} is not a passive strategy"])


class MovingAveragePolicy:
    """Compares a short and a long simple moving average of the closing prices.

    Trend following goes long while the short average is above the long one and short
    otherwise; mean reversion takes the opposite position.  Until `long_window` closes have been
    seen the current position is kept.

    Args:
        kind (StrategyKind): TREND_FOLLOWING or MEAN_REVERSION.
        short_window (int): Bars in the short average.
        long_window (int): Bars in the long average.
    """

    def __init__(self, kind: StrategyKind, short_window: int, long_window: int):
        if not kind.is_moving_average:
            raise ConfigError([f"{kind.value} is not a moving-average strategy"])
        if not 1 <= short_window < long_window:
            raise ConfigError([f"windows must satisfy 1 <= short ({short_window}) < long ({long_window})"])
        self.kind = kind
        self.short_window = short_window
        self.long_window = long_window
        self.reset()

    def reset(self):
        self.closes = deque(maxlen=self.long_window)
        self.last_index: Optional[int] = None

    def _remember(self, observation: Observation):
        if self.last_index is not None and observation.index == self.last_index + 1:
            self.closes.append(float(observation.prices[-1]))
        else:
            self.closes.clear()
            self.closes.extend(float(p) for p in observation.prices)
        self.last_index = observation.index

    def __call__(self, observation: Observation) -> int:
        self._remember(observation)
        if len(self.closes) < self.long_window:
            return int(observation.position)
        closes = np.fromiter(self.closes, dtype="float64")
        rising = moving_average(closes, self.short_window)[-1] > moving_average(closes, self.long_window)[-1]
        if self.kind is StrategyKind.MEAN_REVERSION:
            rising = not rising
        return int(Position.LONG if rising else Position.SHORT)


def moving_average_policy(kind: StrategyKind, short_window: int, long_window: int) -> MovingAveragePolicy:
    return MovingAveragePolicy(StrategyKind(kind), short_window, long_window)


def _tdqn_policy(spec: StrategySpec, params: Optional[NetworkParams]) -> Policy:
    if params is None:
        raise ConfigError(["the tdqn strategy needs a trained checkpoint"])
    return GreedyPolicy(params)


STRATEGY_MAP: Dict[StrategyKind, Callable[[StrategySpec, Optional[NetworkParams]], Policy]] = {
    StrategyKind.BUY_HOLD: lambda spec, params: passive_policy(spec.strategy),
    StrategyKind.SELL_HOLD: lambda spec, params: passive_policy(spec.strategy),
    StrategyKind.TREND_FOLLOWING: lambda spec, params: moving_average_policy(spec.strategy, spec.short_window,
                                                                             spec.long_window),
    StrategyKind.MEAN_REVERSION: lambda spec, params: moving_average_policy(spec.strategy, spec.short_window,
                                                                            spec.long_window),
    StrategyKind.TDQN: _tdqn_policy,
}


def make_policy(spec: StrategySpec, params: Optional[NetworkParams] = None) -> Policy:
    """Build the action chooser of a strategy.

    Args:
        spec (StrategySpec): The strategy.
        params (NetworkParams, optional): Trained parameters, only used by the tdqn strategy.

    Returns:
        Policy: Maps an observation to an action index.
    """
    return STRATEGY_MAP[spec.strategy](spec, params)
