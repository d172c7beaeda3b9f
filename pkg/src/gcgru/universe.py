"""Price-panel ingestion: loading, calendar alignment, labels, scaling, windows.

The pipeline turns per-stock OHLCV tables into a day-major panel shared by
every stock in the universe:

    load_prices -> align_and_fill -> make_labels / minmax_normalize
                -> window_dataset -> chrono_split

Input features are open, high, low, volume; the close is used only to build
the up/down labels. All arrays are float64.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from datetime import date
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

FEATURES = ("open", "high", "low", "volume")
N_FEATURES = len(FEATURES)
PRICE_COLUMNS = ("date", "stock_id", "open", "high", "low", "volume", "close")

#: Out-of-range normalized values (val/test only) are clamped to this band.
CLAMP_LO = -0.5
CLAMP_HI = 1.5

DEFAULT_FRACTIONS = (0.7, 0.1, 0.2)


@dataclass(frozen=True)
class StockUniverse:
    """Ordered registry of stock identifiers; fixes the shared node index space."""

    ids: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.ids) < 2:
            raise ValueError("universe needs at least 2 stocks")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate stock identifiers in universe")

    @cached_property
    def index(self) -> dict[str, int]:
        return {sid: i for i, sid in enumerate(self.ids)}

    @property
    def size(self) -> int:
        return len(self.ids)

    def __contains__(self, stock_id: str) -> bool:
        return stock_id in self.index

    @classmethod
    def from_ids(cls, ids: Iterable[str]) -> "StockUniverse":
        return cls(tuple(ids))


@dataclass(frozen=True)
class PriceRow:
    day: date
    open: float
    high: float
    low: float
    volume: float
    close: float


@dataclass
class RawSeries:
    """One stock's raw rows, sorted by strictly increasing date."""

    stock_id: str
    rows: list[PriceRow]


@dataclass(frozen=True)
class NormRecords:
    """Per-(stock, feature) min/max fitted on the training range."""

    mins: np.ndarray  # (N, F)
    maxs: np.ndarray  # (N, F)

    def denormalize(self, scaled: np.ndarray) -> np.ndarray:
        return self.mins + scaled * (self.maxs - self.mins)


@dataclass
class PanelDataset:
    """Day-major normalized feature tensor plus labels and split boundaries."""

    calendar: tuple[date, ...]
    features: np.ndarray  # (T, N, F) normalized
    labels: np.ndarray  # (T, N) in {0, 1}
    split: tuple[int, int]  # (train_end_day, val_end_day), day indices
    norm: NormRecords | None = None

    @property
    def n_days(self) -> int:
        return self.features.shape[0]

    @property
    def n_stocks(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class WindowSample:
    """Lag window of days d-P .. d-1 with the movement labels of day d."""

    window: np.ndarray  # (P, N, F)
    label: np.ndarray  # (N,)
    day: int  # calendar index d


def load_prices(path: str | Path, universe: StockUniverse) -> list[RawSeries]:
    """Parse a delimited prices file into one RawSeries per universe member found.

    Unknown stock ids are reported via logging and skipped. Malformed rows,
    nonpositive prices and negative volumes abort with the offending line
    number.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"prices file not found: {path}")

    rows_by_stock: dict[str, list[PriceRow]] = {}
    unknown: set[str] = set()
    n_rows = 0
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"no rows in {path}")
        missing = set(PRICE_COLUMNS) - set(reader.fieldnames)
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for line_no, rec in enumerate(reader, start=2):
            n_rows += 1
            sid = rec["stock_id"]
            if sid not in universe:
                unknown.add(sid)
                continue
            try:
                day = date.fromisoformat(rec["date"])
                o = float(rec["open"])
                h = float(rec["high"])
                lo = float(rec["low"])
                v = float(rec["volume"])
                c = float(rec["close"])
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{line_no}: malformed row ({exc})") from exc
            if min(o, h, lo, c) <= 0:
                raise ValueError(f"{path}:{line_no}: nonpositive price for {sid}")
            if v < 0:
                raise ValueError(f"{path}:{line_no}: negative volume for {sid}")
            rows_by_stock.setdefault(sid, []).append(PriceRow(day, o, h, lo, v, c))

    if n_rows == 0:
        raise ValueError(f"no rows in {path}")
    for sid in sorted(unknown):
        logger.warning("skipping rows for unknown stock id %r", sid)

    series: list[RawSeries] = []
    for sid in universe.ids:
        if sid not in rows_by_stock:
            continue
        rows = sorted(rows_by_stock[sid], key=lambda r: r.day)
        for a, b in zip(rows, rows[1:]):
            if a.day == b.day:
                raise ValueError(f"{path}: duplicate date {a.day} for {sid}")
        series.append(RawSeries(sid, rows))
    return series


def align_and_fill(
    series: Sequence[RawSeries], universe: StockUniverse
) -> tuple[tuple[date, ...], np.ndarray, np.ndarray]:
    """Align all stocks onto the union calendar, forward-filling gaps.

    A date missing from one stock's series is filled with that stock's most
    recent prior row; dates before its first observation are filled with the
    first row. Returns (calendar, features (T, N, F), closes (T, N)).
    """
    by_id = {s.stock_id: s for s in series}
    for sid in universe.ids:
        s = by_id.get(sid)
        if s is None or not s.rows:
            raise ValueError(f"stock {sid!r} has zero rows")
    for s in series:
        for a, b in zip(s.rows, s.rows[1:]):
            if a.day >= b.day:
                raise ValueError(f"dates not strictly increasing for {s.stock_id!r}")

    calendar = tuple(sorted({row.day for s in series for row in s.rows}))
    n_days, n_stocks = len(calendar), universe.size
    features = np.empty((n_days, n_stocks, N_FEATURES), dtype=np.float64)
    closes = np.empty((n_days, n_stocks), dtype=np.float64)

    for j, sid in enumerate(universe.ids):
        rows = by_id[sid].rows
        i = 0
        for t, day in enumerate(calendar):
            while i + 1 < len(rows) and rows[i + 1].day <= day:
                i += 1
            row = rows[0] if rows[i].day > day else rows[i]
            features[t, j] = (row.open, row.high, row.low, row.volume)
            closes[t, j] = row.close
    return calendar, features, closes


def make_labels(closes: np.ndarray) -> np.ndarray:
    """Binary movement labels: 1 iff close rose versus the previous day.

    Equality counts as negative. Day 0 is labeled 0 and is never used as a
    target (windows start at d >= lag >= 1).
    """
    if closes.shape[0] < 2:
        raise ValueError("need at least 2 days to build labels")
    labels = np.zeros(closes.shape, dtype=np.int64)
    labels[1:] = (closes[1:] > closes[:-1]).astype(np.int64)
    return labels


def minmax_normalize(
    features: np.ndarray, train_end: int
) -> tuple[np.ndarray, NormRecords]:
    """Min-max scale each (stock, feature) using statistics from days [0, train_end).

    Training-range values land in [0, 1] exactly; later values may overshoot
    and are clamped to [-0.5, 1.5]. A constant feature maps to 0 everywhere.
    """
    if train_end < 2:
        raise ValueError("train_end must be >= 2")
    if train_end > features.shape[0]:
        raise ValueError("train_end exceeds number of days")
    mins = features[:train_end].min(axis=0)
    maxs = features[:train_end].max(axis=0)
    span = maxs - mins
    scaled = np.zeros_like(features)
    np.divide(features - mins, span, out=scaled, where=span > 0)
    np.clip(scaled, CLAMP_LO, CLAMP_HI, out=scaled)
    return scaled, NormRecords(mins=mins, maxs=maxs)


def window_dataset(panel: PanelDataset, lag: int) -> list[WindowSample]:
    """One sample per target day d in [lag, T), in chronological order."""
    if lag < 1:
        raise ValueError("lag must be >= 1")
    if panel.n_days <= lag:
        raise ValueError(f"need more than lag={lag} days, got {panel.n_days}")
    return [
        WindowSample(
            window=panel.features[d - lag : d],
            label=panel.labels[d],
            day=d,
        )
        for d in range(lag, panel.n_days)
    ]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_counts(
    n_samples: int, fractions: tuple[float, float, float] = DEFAULT_FRACTIONS
) -> tuple[int, int, int]:
    if n_samples < 10:
        raise ValueError(f"too few samples to split: {n_samples}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    n_train = _round_half_up(fractions[0] * n_samples)
    n_val = _round_half_up(fractions[1] * n_samples)
    n_test = n_samples - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ValueError("split produced an empty segment")
    return n_train, n_val, n_test


def chrono_split(
    samples: Sequence[WindowSample],
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS,
) -> tuple[list[WindowSample], list[WindowSample], list[WindowSample]]:
    """Contiguous chronological train/val/test segments, no shuffling."""
    n_train, n_val, _ = split_counts(len(samples), fractions)
    return (
        list(samples[:n_train]),
        list(samples[n_train : n_train + n_val]),
        list(samples[n_train + n_val :]),
    )


def build_panel(
    series: Sequence[RawSeries],
    universe: StockUniverse,
    lag: int,
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS,
) -> tuple[PanelDataset, list[WindowSample], tuple[list[WindowSample], list[WindowSample], list[WindowSample]]]:
    """Full preprocessing pipeline from raw series to split window samples.

    Normalization statistics are fitted on days [0, first validation target
    day) only, so no information leaks backwards across the split.
    """
    calendar, raw_features, closes = align_and_fill(series, universe)
    labels = make_labels(closes)
    n_samples = len(calendar) - lag
    if n_samples < 10:
        raise ValueError(f"too few window samples: {n_samples}")
    n_train, n_val, _ = split_counts(n_samples, fractions)
    train_end_day = lag + n_train
    val_end_day = train_end_day + n_val

    scaled, records = minmax_normalize(raw_features, train_end_day)
    panel = PanelDataset(
        calendar=calendar,
        features=scaled,
        labels=labels,
        split=(train_end_day, val_end_day),
        norm=records,
    )
    samples = window_dataset(panel, lag)
    return panel, samples, chrono_split(samples, fractions)


def read_universe(path: str | Path) -> StockUniverse:
    """Build a universe from the distinct stock ids of a prices file, sorted."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"prices file not found: {path}")
    ids: set[str] = set()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "stock_id" not in reader.fieldnames:
            raise ValueError(f"{path}: missing stock_id column")
        for rec in reader:
            ids.add(rec["stock_id"])
    if len(ids) < 2:
        raise ValueError(f"{path}: fewer than 2 distinct stock ids")
    return StockUniverse.from_ids(sorted(ids))


def write_normalization_csv(
    path: str | Path, universe: StockUniverse, records: NormRecords
) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stock_id", "feature", "min", "max"])
        for j, sid in enumerate(universe.ids):
            for f, feat in enumerate(FEATURES):
                writer.writerow(
                    [sid, feat, f"{records.mins[j, f]:.17g}", f"{records.maxs[j, f]:.17g}"]
                )


def read_normalization_csv(path: str | Path, universe: StockUniverse) -> NormRecords:
    mins = np.full((universe.size, N_FEATURES), np.nan)
    maxs = np.full((universe.size, N_FEATURES), np.nan)
    feat_index = {feat: f for f, feat in enumerate(FEATURES)}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            j = universe.index[rec["stock_id"]]
            f = feat_index[rec["feature"]]
            mins[j, f] = float(rec["min"])
            maxs[j, f] = float(rec["max"])
    if np.isnan(mins).any() or np.isnan(maxs).any():
        raise ValueError(f"{path}: incomplete normalization records")
    return NormRecords(mins=mins, maxs=maxs)
