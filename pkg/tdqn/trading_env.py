import copy
import logging
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Callable, List, NamedTuple, Optional, Tuple, Union

import numpy as np
import pandas as pd

from tdqn.env_mixins import AgentState, ConstraintMixin, Position, SizingMixin, initial_state, q_long, q_short
from tdqn.errors import DataError, InvariantViolation, TdqnError
from tdqn.market_data import OhlcvSeries
from tdqn.preprocessing import FeatureScaler, FeatureWindow, compute_features, minimum_length
from tdqn.settings import EnvConfig

logger = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = ("date", "price", "action", "quantity", "cash", "shares", "value_before", "value", "reward")


@dataclass(frozen=True)
class Observation:
    """What the agent sees at time t: tau+1 normalised feature rows, the raw closes of the same
    bars and the current position."""

    window: np.ndarray
    position: Position
    prices: np.ndarray
    index: int
    date: date

    def vector(self) -> np.ndarray:
        """The flattened network input, position encoded as +1 (long) or -1 (short)."""
        return np.append(self.window.ravel(), self.position.encoding)


class Experience(NamedTuple):
    """One transition as stored in replay memory, observations already flattened."""

    observation: np.ndarray
    action: int
    reward: float
    next_observation: np.ndarray
    terminal: bool


class Transition(NamedTuple):
    action: Position
    quantity: int
    reward: float
    value_before: float
    value_after: float
    infeasible: bool


@dataclass(frozen=True)
class StepRecord:
    """One row of a trajectory dump."""

    date: date
    price: float
    action: int
    quantity: int
    cash: float
    shares: int
    value_before: float
    value: float
    reward: float


@dataclass
class Trajectory:
    """The ordered steps of one episode and, when collected, its experiences."""

    instrument: str
    records: List[StepRecord] = field(default_factory=list)
    experiences: List[Experience] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def values(self) -> np.ndarray:
        """Portfolio values: the value before the first step followed by the value after each step."""
        if not self.records:
            return np.zeros(0)
        return np.array([self.records[0].value_before] + [r.value for r in self.records])

    def positions(self) -> List[Position]:
        return [Position(r.action) for r in self.records]

    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.records])

    @property
    def total_reward(self) -> float:
        return float(self.rewards().sum())

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([r.__dict__ for r in self.records], columns=list(TRAJECTORY_COLUMNS))
        frame["date"] = pd.to_datetime(frame["date"])
        return frame.set_index("date")

    def write_csv(self, path: Union[str, Path]) -> Path:
        """Dump the records as CSV with round-trip exact numbers.

        Args:
            path (Union[str, Path]): Destination file.

        Returns:
            Path: The written file.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        rows = [",".join(TRAJECTORY_COLUMNS)]
        for r in self.records:
            rows.append(",".join([r.date.isoformat(), repr(float(r.price)), str(int(r.action)), str(r.quantity),
                                  repr(float(r.cash)), str(r.shares), repr(float(r.value_before)),
                                  repr(float(r.value)), repr(float(r.reward))]))
        path.write_text("\n".join(rows) + "\n")
        return path

    @classmethod
    def read_csv(cls, path: Union[str, Path], instrument: str = "") -> "Trajectory":
        """Load a trajectory dump written by `write_csv`.

        Args:
            path (Union[str, Path]): The CSV file.
            instrument (str): Name attached to the trajectory. Defaults to "".

        Returns:
            Trajectory: The records (experiences are not dumped).
        """
        frame = pd.read_csv(path, float_precision="round_trip", dtype={"action": int, "quantity": int, "shares": int})
        if tuple(frame.columns) != TRAJECTORY_COLUMNS:
            raise DataError(f"{path}: not a trajectory dump", line=1)
        records = [
            StepRecord(date.fromisoformat(row.date), row.price, int(row.action), int(row.quantity), row.cash,
                       int(row.shares), row.value_before, row.value, row.reward)
            for row in frame.itertuples(index=False)
        ]
        return cls(instrument or Path(path).stem, records)


class Market(ConstraintMixin, SizingMixin):
    """The trading rules of the environment without any price series attached.

    Args:
        config (EnvConfig): Trading costs and bounds.
    """

    def __init__(self, config: EnvConfig):
        self.config = config

    def transition(self, state: AgentState, action: int, price_now: float,
                   price_next: float) -> Tuple[AgentState, float, Transition]:
        """Trade at `price_now`, then value the portfolio at `price_next`.

        Args:
            state (AgentState): State before trading.
            action (int): 0 (short) or 1 (long).
            price_now (float): Trade price p_t.
            price_next (float): Next price p_{t+1}.

        Returns:
            tuple (AgentState, float, Transition): The new state, the reward and the trade details.
        """
        if price_now <= 0 or price_next <= 0:
            raise DataError(f"prices must be positive, got {price_now} and {price_next}")
        action = Position(action)
        state = state.valued_at(price_now)
        value_before = state.value
        quantity, infeasible = self.quantity_for(state, action, price_now)
        cost = self.config.cost_rate * abs(quantity) * price_now
        traded = AgentState(cash=state.cash - quantity * price_now - cost, shares=state.shares + quantity,
                            position=action, price=price_now, last_action=action)
        breaches = self.constraint_breaches(traded, price_now, buy_back=not infeasible)
        if breaches:
            raise InvariantViolation("; ".join(breaches))
        after = traded.valued_at(price_next)
        reward = (after.value - value_before) / abs(value_before) if value_before != 0 else 0.0
        return after, reward, Transition(action, quantity, reward, value_before, after.value, infeasible)


def step(state: AgentState, action: int, price_now: float, price_next: float,
         config: EnvConfig) -> Tuple[AgentState, float, Transition]:
    """Apply one action: see `Market.transition`."""
    return Market(config).transition(state, action, price_now, price_next)


def build_observation(features: FeatureWindow, state: AgentState,
                      prices: Optional[np.ndarray] = None) -> Observation:
    """Combine a feature window with the agent's position.

    Args:
        features (FeatureWindow): Normalised rows ending at the current bar.
        state (AgentState): The current state.
        prices (np.ndarray, optional): Raw closes of the same bars. Defaults to None.

    Returns:
        Observation: The observation for time `features.end_index`.
    """
    if not features.complete:
        raise DataError(f"feature window ending {features.end_date} has {features.rows.shape[0]} rows, "
                        f"{features.tau + 1} needed")
    if prices is None:
        prices = np.full(features.tau + 1, state.price)
    return Observation(features.rows, state.position, np.asarray(prices, dtype="float64"),
                       features.end_index, features.end_date)


class TradingEnv(Market):
    """A daily trading environment over one price series.

    Decisions are taken at the close of bar t, starting at t = tau, and the episode ends when the
    last bar is reached.

    Args:
        series (OhlcvSeries): The bars to trade.
        config (EnvConfig): Trading costs, bounds and observation settings.
        scaler (FeatureScaler, optional): Feature statistics fitted on training data. Defaults to
            None (fitted on `series`).
    """

    def __init__(self, series: OhlcvSeries, config: EnvConfig, scaler: Optional[FeatureScaler] = None):
        super().__init__(config)
        needed = minimum_length(config.tau, config.filter_window)
        if len(series) < needed:
            raise DataError(f"{series.instrument}: {len(series)} bars, at least {needed} needed")
        self.series = series
        self.prices = series.closes
        self.dates = series.dates
        raw = compute_features(series, config.filter_window)
        self.scaler = scaler or FeatureScaler.fit(raw)
        self.features = self.scaler.transform(raw)
        self.epsilon_violations = 0
        self.reset()

    def reset(self) -> Observation:
        self.t = self.config.tau
        self.state = initial_state(self.config, self.prices[self.t])
        self.records = []
        return self.observe()

    @property
    def done(self) -> bool:
        return self.t >= len(self.prices) - 1

    @property
    def steps_per_episode(self) -> int:
        return len(self.prices) - 1 - self.config.tau

    def observe(self) -> Observation:
        start = self.t - self.config.tau
        return Observation(self.features[start:self.t + 1], self.state.position,
                           self.prices[start:self.t + 1], self.t, self.dates[self.t])

    def step(self, action: int) -> Tuple[Observation, float, bool, StepRecord]:
        """Execute an action at the current close and move to the next bar.

        Args:
            action (int): 0 (short) or 1 (long).

        Returns:
            tuple (Observation, float, bool, StepRecord): Next observation, reward, terminal flag and
            the trajectory record of this step.
        """
        if self.done:
            raise TdqnError("episode is over; call reset()")
        price, price_next = self.prices[self.t], self.prices[self.t + 1]
        if abs(price_next / price - 1.0) > self.config.epsilon_bound:
            self.epsilon_violations += 1
            logger.debug("%s %s: move %.4f beyond epsilon %.4f", self.series.instrument, self.dates[self.t + 1],
                         price_next / price - 1.0, self.config.epsilon_bound)
        self.state, reward, transition = self.transition(self.state, action, price, price_next)
        record = StepRecord(self.dates[self.t], float(price), int(transition.action), int(transition.quantity),
                            float(self.state.cash), int(self.state.shares), float(transition.value_before),
                            float(transition.value_after), float(reward))
        self.records.append(record)
        self.t += 1
        return self.observe(), reward, self.done, record

    def clone(self) -> "TradingEnv":
        """An independent copy sharing only the immutable price and feature arrays."""
        twin = copy.copy(self)
        twin.records = list(self.records)
        return twin

    def trajectory(self) -> Trajectory:
        return Trajectory(self.series.instrument, list(self.records))


Policy = Callable[[Observation], int]


def run_trajectory(series: OhlcvSeries, policy: Policy, config: EnvConfig, mirror: bool = False,
                   scaler: Optional[FeatureScaler] = None,
                   on_step: Optional[Callable[[List[Experience]], None]] = None) -> Tuple[Trajectory, Optional[Trajectory]]:
    """Run a policy over a whole series.

    With `mirror` on, the opposite action is also executed at every step on a copy of the
    environment taken from the same pre-state; prices are not affected by the agent, so both
    copies see the same market.

    Args:
        series (OhlcvSeries): The bars to trade.
        policy (Policy): Maps an observation to an action index.
        config (EnvConfig): Environment settings.
        mirror (bool): Also collect the mirrored experiences. Defaults to False.
        scaler (FeatureScaler, optional): Training feature statistics. Defaults to None.
        on_step (Callable, optional): Receives the experiences of every step as they are produced,
            the mirrored one first. Defaults to None.

    Returns:
        tuple (Trajectory, Optional[Trajectory]): The trajectory and the mirrored one (or None).
    """
    env = TradingEnv(series, config, scaler)
    observation = env.reset()
    experiences = []
    mirrored = Trajectory(f"{series.instrument}~mirror") if mirror else None
    while not env.done:
        action = Position(policy(observation))
        vector = observation.vector()
        produced = []
        if mirror:
            twin = env.clone()
            twin_observation, twin_reward, twin_done, twin_record = twin.step(action.opposite)
            mirrored.records.append(twin_record)
            produced.append(Experience(vector, int(action.opposite), twin_reward, twin_observation.vector(), twin_done))
            mirrored.experiences.append(produced[-1])
        observation, reward, done, _ = env.step(action)
        produced.append(Experience(vector, int(action), reward, observation.vector(), done))
        experiences.append(produced[-1])
        if on_step is not None:
            on_step(produced)
    if env.epsilon_violations:
        logger.warning("%s: %d daily moves exceeded epsilon %.3f", series.instrument, env.epsilon_violations,
                       config.epsilon_bound)
    trajectory = env.trajectory()
    trajectory.experiences = experiences
    return trajectory, mirrored


__all__ = ["AgentState", "Experience", "Market", "Observation", "Policy", "Position", "StepRecord", "Trajectory",
           "TradingEnv", "Transition", "build_observation", "q_long", "q_short", "run_trajectory", "step"]
