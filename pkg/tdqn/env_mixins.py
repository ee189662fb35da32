import math
from dataclasses import dataclass, replace
from enum import IntEnum
from typing import List, Optional, Tuple

from tdqn.settings import EnvConfig

# Relative slack when asserting the cash constraints on floating point values.
TOLERANCE = 1e-9


class Position(IntEnum):
    """Trading position; the value doubles as the action index."""

    SHORT = 0
    LONG = 1

    @property
    def encoding(self) -> float:
        return 1.0 if self is Position.LONG else -1.0

    @property
    def opposite(self) -> "Position":
        return Position(1 - self)


@dataclass(frozen=True)
class AgentState:
    """Cash, signed share count and position of the trading agent.

    `price` is the last price the holdings were valued at; `last_action` is None before
    the first decision of an episode.
    """

    cash: float
    shares: int
    position: Position
    price: float
    last_action: Optional[Position] = None

    @property
    def value(self) -> float:
        return self.cash + self.shares * self.price

    def valued_at(self, price: float) -> "AgentState":
        return replace(self, price=price)


def initial_state(config: EnvConfig, price: float) -> AgentState:
    """All cash, no shares, nominally long until the first action."""
    return AgentState(cash=config.initial_cash, shares=0, position=Position.LONG, price=price)


def action_upper_bound(state: AgentState, price: float, config: EnvConfig) -> float:
    """The largest real quantity that keeps the cash non-negative after buying.

    Args:
        state (AgentState): State before trading.
        price (float): Trade price p_t.
        config (EnvConfig): Trading costs and bounds.

    Returns:
        float: v^c / (p (1 + C)).
    """
    return state.cash / (price * (1.0 + config.cost_rate))


def action_lower_bound(state: AgentState, price: float, config: EnvConfig) -> float:
    """The smallest real quantity that still lets the agent return to a neutral position if the
    next price moves by the assumed maximum relative change, trading costs included.

    Args:
        state (AgentState): State before trading.
        price (float): Trade price p_t.
        config (EnvConfig): Trading costs and bounds.

    Returns:
        float: The lower bound on the traded quantity.
    """
    cost, epsilon = config.cost_rate, config.epsilon_bound
    delta = -state.cash - state.shares * price * (1.0 + epsilon) * (1.0 + cost)
    if delta >= 0:
        return delta / (price * epsilon * (1.0 + cost))
    return delta / (price * (2.0 * cost + epsilon * (1.0 + cost)))


def feasible_range(state: AgentState, price: float, config: EnvConfig) -> range:
    """The integer quantities satisfying both constraints, possibly empty."""
    low = math.ceil(action_lower_bound(state, price, config))
    high = math.floor(action_upper_bound(state, price, config))
    return range(low, high + 1)


def affordable_shares(state: AgentState, price: float, config: EnvConfig) -> int:
    return math.floor(state.cash / (price * (1.0 + config.cost_rate)))


def q_long(state: AgentState, price: float, previous_action: Optional[Position], config: EnvConfig) -> int:
    """Quantity that turns every unit of cash into shares, or 0 when already long.

    Args:
        state (AgentState): State before trading.
        price (float): Trade price p_t.
        previous_action (Position, optional): Action of the previous step, None at episode start.
        config (EnvConfig): Trading costs and bounds.

    Returns:
        int: Shares to buy.
    """
    if previous_action is Position.LONG:
        return 0
    return affordable_shares(state, price, config)


def q_short(state: AgentState, price: float, previous_action: Optional[Position], config: EnvConfig) -> int:
    """Quantity that mirrors the long position into a short one, clamped to the lower bound.

    Args:
        state (AgentState): State before trading.
        price (float): Trade price p_t.
        previous_action (Position, optional): Action of the previous step, None at episode start.
        config (EnvConfig): Trading costs and bounds.

    Returns:
        int: Shares to trade (negative means selling).
    """
    candidate = 0
    if previous_action is not Position.SHORT:
        candidate = -2 * state.shares - affordable_shares(state, price, config)
    return max(candidate, math.ceil(action_lower_bound(state, price, config)))


class ConstraintMixin:
    """An environment mixin that checks the two cash constraints on post-trade states.
    """

    config: EnvConfig

    def cash_floor(self, shares: int, price: float) -> float:
        """Cash needed to buy back `shares` (if short) after the worst assumed move.

        Args:
            shares (int): Share count after trading.
            price (float): Trade price p_t.

        Returns:
            float: -n p (1 + eps)(1 + C).
        """
        return -shares * price * (1.0 + self.config.epsilon_bound) * (1.0 + self.config.cost_rate)

    def constraint_breaches(self, state: AgentState, decision_price: float, buy_back: bool = True) -> List[str]:
        """List the constraints a post-trade state breaks.

        Args:
            state (AgentState): State right after trading.
            decision_price (float): The price the trade was made at.
            buy_back (bool): Also check the buy-back requirement. Defaults to True.

        Returns:
            List[str]: Human readable descriptions, empty when both constraints hold.
        """
        scale = TOLERANCE * max(1.0, abs(state.cash), abs(state.shares * decision_price))
        breaches = []
        if state.cash < -scale:
            breaches.append(f"cash {state.cash} is negative")
        floor = self.cash_floor(state.shares, decision_price)
        if buy_back and state.cash < floor - scale:
            breaches.append(f"cash {state.cash} below buy-back requirement {floor}")
        return breaches


class SizingMixin:
    """An environment mixin that turns an action into a feasible traded quantity.
    """

    config: EnvConfig

    def quantity_for(self, state: AgentState, action: Position, price: float) -> Tuple[int, bool]:
        """Pick the quantity for `action`, falling back to the largest affordable purchase when no
        feasible quantity exists (only after a move beyond the assumed bound).

        Args:
            state (AgentState): State before trading.
            action (Position): The chosen action.
            price (float): Trade price p_t.

        Returns:
            tuple (int, bool): The quantity and whether the feasible set was empty.
        """
        feasible = feasible_range(state, price, self.config)
        if not len(feasible):
            return feasible.stop - 1, True
        if action is Position.LONG:
            return q_long(state, price, state.last_action, self.config), False
        return q_short(state, price, state.last_action, self.config), False
