import hashlib
import io
import logging
import time
from dataclasses import dataclass
from datetime import date, timedelta
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import requests
import yaml

from tdqn.errors import DataError

logger = logging.getLogger(__name__)

COLUMNS = ("date", "open", "high", "low", "close", "volume")
PRICE_COLUMNS = ("open", "high", "low", "close")
BAR_COLUMNS = PRICE_COLUMNS + ("volume",)

# Calendar slack before a range gap counts as truncation (weekends and holidays).
RANGE_SLACK = timedelta(days=7)


@dataclass(frozen=True)
class OhlcvBar:
    """One daily bar of an instrument."""

    timestamp: date
    open: float
    high: float
    low: float
    close: float
    volume: float

    def violations(self) -> List[str]:
        """List the bar invariants that do not hold.

        Returns:
            List[str]: One message per broken invariant.
        """
        return _bar_violations(self.open, self.high, self.low, self.close, self.volume)


def _bar_violations(o: float, h: float, l: float, c: float, v: float) -> List[str]:
    problems = []
    if min(o, h, l, c) <= 0:
        problems.append("prices must be positive")
    if v < 0:
        problems.append("volume must be non-negative")
    if l > h:
        problems.append(f"low {l} above high {h}")
    if l > min(o, c):
        problems.append(f"low {l} above min(open, close) {min(o, c)}")
    if h < max(o, c):
        problems.append(f"high {h} below max(open, close) {max(o, c)}")
    return problems


@dataclass(frozen=True)
class HttpSource:
    """A remote CSV endpoint.

    Args:
        url_template (str): URL with {ticker}, {start} and {end} placeholders.
        timeout (float): Seconds per request. Defaults to 10.
        retries (int): Extra attempts after a failed request. Defaults to 3.
    """

    url_template: str
    timeout: float = 10.0
    retries: int = 3

    def url(self, instrument: str, start: Optional[date], end: Optional[date]) -> str:
        return self.url_template.format(ticker=instrument, start=start.isoformat() if start else "",
                                        end=end.isoformat() if end else "")


class OhlcvSeries:
    """An immutable, date-ordered sequence of daily bars for one instrument.

    Args:
        instrument (str): The ticker.
        frame (pd.DataFrame): Bars indexed by date with open/high/low/close/volume columns.
    """

    frequency = "1D"

    def __init__(self, instrument: str, frame: pd.DataFrame):
        frame = frame.loc[:, list(BAR_COLUMNS)].astype("float64").copy()
        frame.index = pd.DatetimeIndex(frame.index).normalize()
        frame.index.name = "date"
        if not frame.index.is_monotonic_increasing or frame.index.has_duplicates:
            raise DataError(f"{instrument}: bar dates must be strictly increasing")
        self.instrument = instrument
        self._frame = frame

    @classmethod
    def from_bars(cls, instrument: str, bars: Sequence[OhlcvBar]) -> "OhlcvSeries":
        frame = pd.DataFrame(
            [[b.open, b.high, b.low, b.close, b.volume] for b in bars],
            index=pd.DatetimeIndex([pd.Timestamp(b.timestamp) for b in bars]),
            columns=list(BAR_COLUMNS),
        )
        return cls(instrument, frame)

    @classmethod
    def from_closes(cls, instrument: str, closes: Sequence[float], start: date = date(2012, 1, 2),
                    volume: float = 1_000_000.0) -> "OhlcvSeries":
        """Build a series whose open, high and low equal the close, on consecutive business days.

        Args:
            instrument (str): The ticker.
            closes (Sequence[float]): Closing prices.
            start (date): Date of the first bar. Defaults to 2012-01-02.
            volume (float): Constant volume. Defaults to one million.
        """
        closes = np.asarray(closes, dtype="float64")
        index = pd.bdate_range(start=start, periods=len(closes))
        frame = pd.DataFrame({"open": closes, "high": closes, "low": closes, "close": closes,
                              "volume": np.full(len(closes), volume)}, index=index)
        return cls(instrument, frame)

    @property
    def frame(self) -> pd.DataFrame:
        return self._frame.copy()

    @property
    def bars(self) -> List[OhlcvBar]:
        return [OhlcvBar(ts.date(), *row) for ts, row in zip(self._frame.index, self._frame.itertuples(index=False))]

    @property
    def dates(self) -> List[date]:
        return [ts.date() for ts in self._frame.index]

    @property
    def closes(self) -> np.ndarray:
        return self._frame["close"].to_numpy(copy=True)

    def values(self) -> np.ndarray:
        """The bars as a (n, 5) float array in open/high/low/close/volume order."""
        return self._frame.to_numpy(copy=True)

    @property
    def first_date(self) -> date:
        return self._frame.index[0].date()

    @property
    def last_date(self) -> date:
        return self._frame.index[-1].date()

    def __len__(self) -> int:
        return len(self._frame)

    def __getitem__(self, item: slice) -> "OhlcvSeries":
        if not isinstance(item, slice):
            raise TypeError("series can only be sliced")
        return OhlcvSeries(self.instrument, self._frame.iloc[item])

    def between(self, start: Optional[date] = None, end: Optional[date] = None) -> "OhlcvSeries":
        """Bars whose date lies in [start, end]."""
        mask = np.ones(len(self), dtype=bool)
        if start is not None:
            mask &= self._frame.index >= pd.Timestamp(start)
        if end is not None:
            mask &= self._frame.index <= pd.Timestamp(end)
        return OhlcvSeries(self.instrument, self._frame.loc[mask])

    def with_values(self, values: np.ndarray, instrument: Optional[str] = None) -> "OhlcvSeries":
        """A series on the same dates with new bar values."""
        frame = pd.DataFrame(values, index=self._frame.index, columns=list(BAR_COLUMNS))
        return OhlcvSeries(instrument or self.instrument, frame)

    def __eq__(self, other) -> bool:
        return (isinstance(other, OhlcvSeries) and self.instrument == other.instrument
                and self._frame.equals(other._frame))

    def __repr__(self):
        if not len(self):
            return f'OhlcvSeries("{self.instrument}", empty)'
        return f'OhlcvSeries("{self.instrument}", {len(self)} bars, {self.first_date}..{self.last_date})'


@dataclass(frozen=True)
class DatasetSplit:
    """Training, validation (a suffix of training) and test series."""

    train: OhlcvSeries
    validation: OhlcvSeries
    test: OhlcvSeries


def _read_source(source: Union[str, Path, HttpSource], instrument: str, start: Optional[date],
                 end: Optional[date]) -> str:
    if isinstance(source, str) and source.startswith(("http://", "https://")):
        source = HttpSource(source)
    if isinstance(source, HttpSource):
        return _fetch(source, instrument, start, end)
    path = Path(source)
    try:
        return path.read_text()
    except OSError as error:
        raise DataError(f"cannot read {path}: {error}")


def _fetch(source: HttpSource, instrument: str, start: Optional[date], end: Optional[date]) -> str:
    url = source.url(instrument, start, end)
    attempts = source.retries + 1
    for attempt in range(1, attempts + 1):
        try:
            response = requests.get(url, timeout=source.timeout)
            response.raise_for_status()
            return response.text
        except requests.RequestException as error:
            logger.warning("fetch %s failed (attempt %d/%d): %s", url, attempt, attempts, error)
            if attempt < attempts:
                time.sleep(min(2 ** (attempt - 1), 8))
    raise DataError(f"cannot fetch {url} after {attempts} attempts")


def _parse_number(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        return np.nan


def parse_csv(text: str, instrument: str, origin: str = "<csv>") -> OhlcvSeries:
    """Parse CSV text in the canonical schema, rejecting malformed or invalid rows.

    Args:
        text (str): The CSV content, header included.
        instrument (str): The ticker the bars belong to.
        origin (str): Name used in diagnostics. Defaults to "<csv>".

    Returns:
        OhlcvSeries: The validated series, sorted by date.
    """
    try:
        raw = pd.read_csv(io.StringIO(text), dtype=str, keep_default_na=False, skipinitialspace=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as error:
        raise DataError(f"{origin}: unreadable CSV: {error}")
    header = tuple(c.strip().lower() for c in raw.columns)
    if header != COLUMNS:
        raise DataError(f"{origin}: expected header {','.join(COLUMNS)}, got {','.join(raw.columns)}", line=1)
    raw.columns = list(COLUMNS)
    if raw.empty:
        raise DataError(f"{origin}: no rows")

    dates = pd.to_datetime(raw["date"], format="%Y-%m-%d", errors="coerce")
    numbers = pd.DataFrame({column: raw[column].map(_parse_number) for column in BAR_COLUMNS})
    malformed = dates.isna() | numbers.isna().any(axis=1)
    if malformed.any():
        row = int(np.flatnonzero(malformed.to_numpy())[0])
        raise DataError(f"{origin}: malformed row {','.join(raw.iloc[row])!r}", line=row + 2)

    for row, values in enumerate(numbers.itertuples(index=False)):
        problems = _bar_violations(*values)
        if problems:
            raise DataError(f"{origin}: {raw['date'].iloc[row]}: {'; '.join(problems)}", line=row + 2)

    frame = numbers.set_index(pd.DatetimeIndex(dates, name="date"))
    if frame.index.has_duplicates:
        duplicated = frame.index[frame.index.duplicated()][0].date()
        raise DataError(f"{origin}: duplicate date {duplicated}")
    return OhlcvSeries(instrument, frame.sort_index())


def load_series(source: Union[str, Path, HttpSource], instrument: str, start: Optional[date] = None,
                end: Optional[date] = None) -> OhlcvSeries:
    """Load a daily series from a CSV file or an HTTP endpoint serving the same schema.

    Args:
        source (Union[str, Path, HttpSource]): File path, URL template or HttpSource.
        instrument (str): The ticker.
        start (date, optional): First date wanted. Defaults to None.
        end (date, optional): Last date wanted. Defaults to None.

    Returns:
        OhlcvSeries: The validated series restricted to [start, end].
    """
    text = _read_source(source, instrument, start, end)
    series = parse_csv(text, instrument, origin=str(getattr(source, "url_template", source)))
    series = series.between(start, end)
    if not len(series):
        raise DataError(f"{instrument}: no bars between {start} and {end}")
    if start is not None and series.first_date - start > RANGE_SLACK:
        logger.warning("%s: requested start %s but data begins %s; range truncated",
                       instrument, start, series.first_date)
    if end is not None and end - series.last_date > RANGE_SLACK:
        logger.warning("%s: requested end %s but data stops %s; range truncated",
                       instrument, end, series.last_date)
    return series


def _format_number(value: float) -> str:
    if float(value).is_integer():
        return str(int(value))
    return repr(float(value))


def to_csv_text(series: OhlcvSeries) -> str:
    """Render a series in the canonical CSV schema with round-trip exact numbers."""
    frame = series.frame
    out = pd.DataFrame({"date": [d.isoformat() for d in series.dates]})
    for column in BAR_COLUMNS:
        out[column] = frame[column].map(_format_number).to_numpy()
    return out.to_csv(index=False, lineterminator="\n")


def write_series(series: OhlcvSeries, path: Union[str, Path]) -> Path:
    """Write a series to disk in the canonical CSV schema.

    Args:
        series (OhlcvSeries): The series to write.
        path (Union[str, Path]): Destination file.

    Returns:
        Path: The written file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_csv_text(series))
    return path


def series_fingerprint(series: OhlcvSeries) -> str:
    """SHA-256 of the canonical CSV text of a series."""
    digest = hashlib.sha256(series.instrument.encode())
    digest.update(to_csv_text(series).encode())
    return digest.hexdigest()


def split_series(series: OhlcvSeries, train_end: date, validation_fraction: float) -> DatasetSplit:
    """Split a series chronologically into training and test sets.

    Args:
        series (OhlcvSeries): The full series.
        train_end (date): Last date belonging to the training set.
        validation_fraction (float): Share of the training bars kept as the validation suffix.

    Returns:
        DatasetSplit: The three series.
    """
    if not 0 < validation_fraction < 1:
        raise DataError(f"validation_fraction {validation_fraction} must lie in (0, 1)")
    train = series.between(end=train_end)
    test = series.between(start=train_end + timedelta(days=1))
    if not len(train):
        raise DataError(f"{series.instrument}: train_end {train_end} precedes the first bar {series.first_date}")
    if not len(test):
        raise DataError(f"{series.instrument}: train_end {train_end} leaves no test bars after {series.last_date}")
    count = min(max(1, int(round(len(train) * validation_fraction))), len(train))
    return DatasetSplit(train=train, validation=train[len(train) - count:], test=test)


@dataclass(frozen=True)
class TestbenchEntry:
    """One instrument of the performance assessment testbench."""

    ticker: str
    name: str
    region: str
    sector: str


def load_testbench(path: Union[str, Path]) -> List[TestbenchEntry]:
    """Read a testbench YAML file: a list of ticker/name/region/sector mappings.

    Args:
        path (Union[str, Path]): The YAML file.

    Returns:
        List[TestbenchEntry]: The instruments in file order.
    """
    path = Path(path)
    try:
        entries = yaml.safe_load(path.read_text()) or []
    except (OSError, yaml.YAMLError) as error:
        raise DataError(f"cannot read testbench {path}: {error}")
    if isinstance(entries, dict):
        entries = entries.get("instruments", [])
    testbench = []
    for position, entry in enumerate(entries):
        try:
            testbench.append(TestbenchEntry(**{k: str(entry[k]) for k in ("ticker", "name", "region", "sector")}))
        except (KeyError, TypeError):
            raise DataError(f"{path}: entry {position} needs ticker, name, region and sector")
    return testbench


def synthetic_series(instrument: str = "SINE", length: int = 2000, period: float = 20.0,
                     amplitude: float = 0.1, level: float = 100.0, trend: float = 0.0,
                     start: date = date(2012, 1, 2)) -> OhlcvSeries:
    """A deterministic sinusoidal (optionally trending) price series.

    Args:
        instrument (str): The ticker. Defaults to "SINE".
        length (int): Number of bars. Defaults to 2000.
        period (float): Period in trading days. Defaults to 20.
        amplitude (float): Relative amplitude around the level. Defaults to 0.1.
        level (float): Mean price. Defaults to 100.
        trend (float): Relative drift per day added to the level. Defaults to 0.

    Returns:
        OhlcvSeries: Bars whose open is the previous close and high/low bracket both.
    """
    t = np.arange(length, dtype="float64")
    closes = level * (1.0 + trend * t) * (1.0 + amplitude * np.sin(2.0 * np.pi * t / period))
    opens = np.concatenate([closes[:1], closes[:-1]])
    highs = np.maximum(opens, closes) * 1.002
    lows = np.minimum(opens, closes) * 0.998
    volume = 1_000_000.0 * (1.0 + 0.5 * np.cos(2.0 * np.pi * t / period))
    index = pd.bdate_range(start=start, periods=length)
    frame = pd.DataFrame({"open": opens, "high": highs, "low": lows, "close": closes, "volume": volume},
                         index=index)
    return OhlcvSeries(instrument, frame)

