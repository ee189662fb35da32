import logging
from dataclasses import dataclass
from datetime import date
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from tdqn.errors import DataError
from tdqn.market_data import OhlcvSeries
from tdqn.settings import AugmentationSpec

logger = logging.getLogger(__name__)

# Smallest price a noisy bar may take, relative to its noiseless value.
PRICE_FLOOR = 0.01


def trailing_mean(values: np.ndarray, window: int) -> np.ndarray:
    """Causal moving average over the last `window` rows; the first rows are padded with the first value.

    Args:
        values (np.ndarray): A (n,) or (n, k) array.
        window (int): Number of rows averaged.

    Returns:
        np.ndarray: Array of the same shape.
    """
    values = np.asarray(values, dtype="float64")
    if window == 1:
        return values.copy()
    padded = np.concatenate([np.repeat(values[:1], window - 1, axis=0), values], axis=0)
    windows = sliding_window_view(padded, window, axis=0)
    # averaging deviations from the latest row keeps flat stretches exact
    return values + (windows - values[..., np.newaxis]).mean(axis=-1)


def relative_changes(values: np.ndarray) -> np.ndarray:
    """x_t / x_{t-1} - 1 row by row; the first row and divisions by zero give 0."""
    values = np.asarray(values, dtype="float64")
    changes = np.zeros_like(values)
    previous = values[:-1]
    np.divide(values[1:] - previous, previous, out=changes[1:], where=previous != 0)
    return changes


def compute_features(series: OhlcvSeries, filter_window: int) -> np.ndarray:
    """Unnormalised features: relative daily changes of the low-pass filtered bars.

    Args:
        series (OhlcvSeries): The bars.
        filter_window (int): Width of the trailing moving average (1 disables filtering).

    Returns:
        np.ndarray: A (len(series), 5) array, columns in open/high/low/close/volume order.
    """
    if filter_window < 1:
        raise DataError(f"filter_window {filter_window} must be >= 1")
    return relative_changes(trailing_mean(series.values(), filter_window))


class FeatureScaler:
    """Per-feature min-max scaling into [-1, 1] with extrema captured on training data.

    Args:
        minimum (np.ndarray): Per-feature minimum.
        maximum (np.ndarray): Per-feature maximum.
    """

    def __init__(self, minimum: np.ndarray, maximum: np.ndarray):
        self.minimum = np.asarray(minimum, dtype="float64")
        self.maximum = np.asarray(maximum, dtype="float64")

    @classmethod
    def fit(cls, features: np.ndarray) -> "FeatureScaler":
        features = np.asarray(features, dtype="float64")
        return cls(features.min(axis=0), features.max(axis=0))

    def transform(self, features: np.ndarray) -> np.ndarray:
        """Scale features; a feature that was constant in training maps to 0."""
        features = np.asarray(features, dtype="float64")
        middle = (self.maximum + self.minimum) / 2.0
        half = (self.maximum - self.minimum) / 2.0
        scaled = np.zeros_like(features)
        np.divide(features - middle, half, out=scaled, where=np.broadcast_to(half > 0, features.shape))
        return scaled

    def to_dict(self) -> Dict[str, List[float]]:
        return {"minimum": self.minimum.tolist(), "maximum": self.maximum.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, List[float]]) -> "FeatureScaler":
        return cls(np.array(data["minimum"]), np.array(data["maximum"]))

    def __eq__(self, other) -> bool:
        return (isinstance(other, FeatureScaler) and np.array_equal(self.minimum, other.minimum)
                and np.array_equal(self.maximum, other.maximum))

    def __repr__(self):
        return f"FeatureScaler(minimum={self.minimum.tolist()}, maximum={self.maximum.tolist()})"


@dataclass(frozen=True)
class FeatureWindow:
    """The tau+1 normalised feature rows ending at bar `end_index`."""

    rows: np.ndarray
    stats: FeatureScaler
    end_index: int
    end_date: date
    tau: int

    @property
    def complete(self) -> bool:
        return self.rows.shape[0] == self.tau + 1


def minimum_length(tau: int, filter_window: int) -> int:
    return tau + 1 + filter_window


def preprocess(series: OhlcvSeries, filter_window: int, tau: int,
               scaler: Optional[FeatureScaler] = None) -> Iterator[FeatureWindow]:
    """Yield the normalised feature window of every time step t >= tau.

    Args:
        series (OhlcvSeries): The bars.
        filter_window (int): Width of the trailing moving average.
        tau (int): History length; each window holds tau+1 rows.
        scaler (FeatureScaler, optional): Statistics fitted on training data. Defaults to None,
            in which case `series` is itself treated as the training set.

    Yields:
        FeatureWindow: One window per time step.
    """
    if len(series) < minimum_length(tau, filter_window):
        raise DataError(f"{series.instrument}: {len(series)} bars, at least "
                        f"{minimum_length(tau, filter_window)} needed for tau={tau}, filter_window={filter_window}")
    raw = compute_features(series, filter_window)
    scaler = scaler or FeatureScaler.fit(raw)
    scaled = scaler.transform(raw)
    dates = series.dates
    for t in range(tau, len(series)):
        yield FeatureWindow(scaled[t - tau:t + 1], scaler, t, dates[t], tau)


def _repair_bars(values: np.ndarray) -> np.ndarray:
    values[:, 1] = values[:, :4].max(axis=1)
    values[:, 2] = values[:, :4].min(axis=1)
    return values


def _filtered(series: OhlcvSeries, window: int) -> np.ndarray:
    return _repair_bars(trailing_mean(series.values(), window))


def _with_noise(values: np.ndarray, sigma: float, rng: np.random.Generator) -> Tuple[np.ndarray, int]:
    if sigma == 0:
        return values.copy(), 0
    prices = values[:, :4]
    noisy = prices * (1.0 + rng.normal(0.0, sigma, size=prices.shape))
    floor = prices * PRICE_FLOOR
    clipped = int(np.count_nonzero(noisy < floor))
    out = values.copy()
    out[:, :4] = np.maximum(noisy, floor)
    return _repair_bars(out), clipped


def augment(series: OhlcvSeries, spec: AugmentationSpec, rng_seed: int) -> List[OhlcvSeries]:
    """Derive artificial series by shifting, filtering and adding noise.

    Every combination of the AugmentationSpec shifts, filter windows and noise levels yields one series.
    A shift of k drops the first k bars, a filter window w applies the trailing moving average
    and a noise level s multiplies each price by 1 + N(0, s).  Bar invariants are restored
    after filtering and noise; prices pushed to or below zero are clipped and counted.

    Args:
        series (OhlcvSeries): The source series.
        spec (AugmentationSpec): The variants wanted.
        rng_seed (int): Seed of the noise generator.

    Returns:
        List[OhlcvSeries]: The derived series, shift-major order.
    """
    rng = np.random.default_rng(rng_seed)
    variants = []
    clipped = 0
    for shift in spec.shifts:
        if shift >= len(series):
            raise DataError(f"{series.instrument}: shift {shift} leaves no bars")
        shifted = series[shift:]
        for window in spec.filter_windows:
            filtered = _filtered(shifted, window)
            for sigma in spec.noise_levels:
                values, count = _with_noise(filtered, sigma, rng)
                clipped += count
                name = f"{series.instrument}+s{shift}f{window}n{sigma:g}"
                variants.append(shifted.with_values(values, instrument=name))
    if clipped:
        logger.warning("%s: %d noisy prices clipped to stay positive", series.instrument, clipped)
    return variants

