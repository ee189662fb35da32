from pathlib import Path
from typing import Dict, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from tdqn.trading_env import Position, Trajectory  # noqa: E402

DPI = 150


def plot_trajectory(trajectory: Trajectory, path: Union[str, Path], title: str = "") -> Path:
    """Price with long/short markers on top, portfolio value below.

    Args:
        trajectory (Trajectory): The trajectory to draw.
        path (Union[str, Path]): Destination image file.
        title (str): Figure title. Defaults to the instrument name.

    Returns:
        Path: The written file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = trajectory.to_frame()
    long = frame["action"] == int(Position.LONG)
    changed = frame["action"].ne(frame["action"].shift())

    fig, (price_ax, value_ax) = plt.subplots(2, 1, figsize=(10, 7), sharex=True)
    price_ax.plot(frame.index, frame["price"], color="#1f77b4", label="Price")
    price_ax.scatter(frame.index[changed & long], frame["price"][changed & long], marker="^", color="green",
                     label="Long", zorder=3)
    price_ax.scatter(frame.index[changed & ~long], frame["price"][changed & ~long], marker="v", color="red",
                     label="Short", zorder=3)
    price_ax.set_ylabel("Price")
    price_ax.legend(loc="upper left")
    price_ax.grid(True, linestyle=":", alpha=0.4)

    value_ax.plot(frame.index, frame["value"], color="black", label="Portfolio value")
    value_ax.set_ylabel("Capital")
    value_ax.set_xlabel("Date")
    value_ax.grid(True, linestyle=":", alpha=0.4)
    fig.suptitle(title or trajectory.instrument)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def plot_expected_performance(curves: pd.DataFrame, path: Union[str, Path], title: str = "") -> Path:
    """Mean Sharpe ratio per episode with a one standard deviation band, training and test sets.

    Args:
        curves (pd.DataFrame): Output of `aggregate_curves`.
        path (Union[str, Path]): Destination image file.
        title (str): Figure title. Defaults to "".

    Returns:
        Path: The written file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(10, 5))
    for prefix, color in (("train", "#1f77b4"), ("test", "#d62728")):
        mean = curves[f"{prefix}_mean"].to_numpy(dtype="float64")
        sd = np.nan_to_num(curves[f"{prefix}_sd"].to_numpy(dtype="float64"))
        ax.plot(curves["episode"], mean, color=color, label=f"{prefix.capitalize()} set")
        ax.fill_between(curves["episode"], mean - sd, mean + sd, color=color, alpha=0.2)
    ax.set_xlabel("Episode")
    ax.set_ylabel("Sharpe ratio")
    ax.set_title(title or "Expected performance")
    ax.grid(True, linestyle=":", alpha=0.4)
    ax.legend(loc="upper left")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def plot_cost_sweep(trajectories: Dict[float, Trajectory], path: Union[str, Path], title: str = "") -> Path:
    """Portfolio value over time for each trading cost rate.

    Args:
        trajectories (Dict[float, Trajectory]): Test trajectory per cost rate.
        path (Union[str, Path]): Destination image file.
        title (str): Figure title. Defaults to "".

    Returns:
        Path: The written file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(10, 5))
    for cost, trajectory in sorted(trajectories.items()):
        frame = trajectory.to_frame()
        ax.plot(frame.index, frame["value"], label=f"Trading costs: {cost * 100:g}%")
    ax.set_xlabel("Date")
    ax.set_ylabel("Capital")
    ax.set_title(title or "Impact of the trading costs")
    ax.grid(True, linestyle=":", alpha=0.4)
    ax.legend(loc="upper left")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path
