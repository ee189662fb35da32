from datetime import date

import numpy as np
import pytest
import requests

from tdqn import market_data
from tdqn.errors import DataError
from tdqn.market_data import (HttpSource, OhlcvBar, OhlcvSeries, load_series, load_testbench, parse_csv,
                              series_fingerprint, split_series, synthetic_series, to_csv_text, write_series)
from tests.helpers import closes_series

HEADER = "date,open,high,low,close,volume\n"
CSV = HEADER + (
    "2020-01-03,10.5,11,10,10.75,2000\n"
    "2020-01-02,10,10.5,9.5,10.25,1500\n"
    "2020-01-06,10.75,10.8,10.1,10.2,0\n"
)


def test_parse_sorts_and_keeps_values():
    """Verify that rows are sorted by date and parsed exactly.
    """
    series = parse_csv(CSV, "ABC")
    assert series.dates == [date(2020, 1, 2), date(2020, 1, 3), date(2020, 1, 6)]
    assert series.closes.tolist() == [10.25, 10.75, 10.2]
    assert series.bars[0] == OhlcvBar(date(2020, 1, 2), 10.0, 10.5, 9.5, 10.25, 1500.0)
    assert len(series) == 3


@pytest.mark.parametrize("row, line", [
    ("2020-01-07,10,9,11,10,100\n", 5),     # low above high
    ("2020-01-07,10,12,9,0,100\n", 5),      # non-positive close
    ("2020-01-07,10,12,9,11,-1\n", 5),      # negative volume
    ("2020-01-07,10,12,10.5,10.2,1\n", 5),  # low above the open
    ("2020-13-07,10,12,9,11,100\n", 5),     # bad date
    ("2020-01-07,ten,12,9,11,100\n", 5),    # bad number
])
def test_invalid_rows_are_rejected(row, line):
    """Verify that an invalid bar raises a DataError naming its line.
    """
    with pytest.raises(DataError) as error:
        parse_csv(CSV + row, "ABC")
    assert error.value.line == line


def test_bad_header_and_duplicates():
    """Verify the header and uniqueness checks.
    """
    with pytest.raises(DataError) as error:
        parse_csv("day,open,high,low,close,volume\n2020-01-02,1,1,1,1,1\n", "ABC")
    assert error.value.line == 1
    with pytest.raises(DataError):
        parse_csv(CSV + "2020-01-02,10,10.5,9.5,10.25,1500\n", "ABC")
    with pytest.raises(DataError):
        parse_csv(HEADER, "ABC")


def test_series_must_increase():
    """Verify that a series with repeated dates cannot be built.
    """
    bar = OhlcvBar(date(2020, 1, 2), 1, 1, 1, 1, 1)
    with pytest.raises(DataError):
        OhlcvSeries.from_bars("ABC", [bar, bar])


def test_csv_text_is_exact(tmp_path):
    """Verify that writing then reading a series gives back identical bars.
    """
    series = synthetic_series("WAVE", length=50, trend=0.001)
    path = write_series(series, tmp_path / "WAVE.csv")
    again = load_series(path, "WAVE")
    assert again == series
    assert to_csv_text(again) == path.read_text()
    assert series_fingerprint(again) == series_fingerprint(series)


def test_fingerprint_changes_with_data():
    """Verify that one changed close changes the fingerprint.
    """
    closes = np.linspace(10, 20, 30)
    first = closes_series(closes)
    closes[7] += 0.01
    assert series_fingerprint(first) != series_fingerprint(closes_series(closes))


def test_load_restricts_range(tmp_path, caplog):
    """Verify that loading keeps the requested dates and warns about a truncated range.
    """
    path = write_series(closes_series(np.arange(1, 41, dtype=float)), tmp_path / "TEST.csv")
    series = load_series(path, "TEST", start=date(2011, 1, 1), end=date(2012, 1, 31))
    assert series.first_date == date(2012, 1, 2)
    assert series.last_date == date(2012, 1, 31)
    assert "range truncated" in caplog.text
    with pytest.raises(DataError):
        load_series(path, "TEST", start=date(2015, 1, 1))
    with pytest.raises(DataError):
        load_series(tmp_path / "missing.csv", "TEST")


def test_http_source(monkeypatch):
    """Verify that the HTTP source formats the URL and retries failed requests.
    """
    calls = []

    class Response:
        text = CSV

        def raise_for_status(self):
            if len(calls) < 2:
                raise requests.HTTPError("503")

    def fake_get(url, timeout):
        calls.append(url)
        return Response()

    monkeypatch.setattr(market_data.requests, "get", fake_get)
    monkeypatch.setattr(market_data.time, "sleep", lambda seconds: None)
    source = HttpSource("https://example.org/{ticker}.csv?from={start}&to={end}", retries=2)
    series = load_series(source, "ABC", start=date(2020, 1, 1), end=date(2020, 1, 10))
    assert len(series) == 3
    assert calls[0] == "https://example.org/ABC.csv?from=2020-01-01&to=2020-01-10"
    assert len(calls) == 2

    calls.clear()
    source = HttpSource("https://example.org/{ticker}.csv", retries=0)
    with pytest.raises(DataError):
        load_series(source, "ABC")


def test_split():
    """Verify the chronological split and the validation suffix.
    """
    series = closes_series(np.linspace(100, 200, 100))
    split = split_series(series, date(2012, 3, 30), 0.2)
    assert split.train.last_date == date(2012, 3, 30)
    assert split.test.first_date == date(2012, 4, 2)
    assert len(split.train) + len(split.test) == 100
    assert len(split.validation) == round(len(split.train) * 0.2)
    assert split.validation.last_date == split.train.last_date
    with pytest.raises(DataError):
        split_series(series, date(2011, 1, 1), 0.2)
    with pytest.raises(DataError):
        split_series(series, date(2013, 1, 1), 0.2)


def test_synthetic_series_is_valid():
    """Verify that synthetic bars satisfy every bar invariant and repeat with the period.
    """
    series = synthetic_series(length=200, period=20)
    assert all(not bar.violations() for bar in series.bars)
    closes = series.closes
    np.testing.assert_allclose(closes[20:], closes[:-20])


def test_testbench_file():
    """Verify the shipped testbench of thirty instruments.
    """
    testbench = load_testbench("configs/testbench.yaml")
    assert len(testbench) == 30
    assert len({entry.ticker for entry in testbench}) == 30
    assert all(entry.name and entry.region and entry.sector for entry in testbench)


def test_testbench_entry_fields(tmp_path):
    """Verify that incomplete testbench entries are rejected.
    """
    path = tmp_path / "bench.yaml"
    path.write_text("- ticker: ABC\n  name: Abc\n")
    with pytest.raises(DataError):
        load_testbench(path)
