"""Stock panel ingestion, relation graphs, windowing, and synthetic data.

A panel holds OHLCV indicators for N stocks over a shared trading-day axis.
Stocks with incomplete date coverage are dropped at load time (whole-stock
removal, no imputation).  Sliding windows carry a z-score-normalized history
tensor whose statistics come from the lookback days only, so nothing after
the anchor day can leak into features.
"""
from __future__ import annotations

import csv
import datetime
from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping

import numpy as np

INDICATOR_COLUMNS = ("open", "high", "low", "close", "volume")
CLOSE_COLUMN = INDICATOR_COLUMNS.index("close")

PRICE_HEADER = ("symbol", "date", "open", "high", "low", "close", "volume")
RELATION_HEADER = ("symbol", "industry")


class PanelError(ValueError):
    """Invalid panel contents."""


class PanelFormatError(PanelError):
    """Malformed input file; message carries the offending line number."""


class InsufficientDataError(PanelError):
    """Fewer than two stocks survive loading/cleaning."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class StockPanel:
    """Per-stock, per-day indicator matrix on a gap-free shared date axis."""

    symbols: tuple[str, ...]
    dates: tuple[str, ...]
    indicators: np.ndarray  # [N, days, M]
    industry: Mapping[str, str]

    def __post_init__(self):
        object.__setattr__(self, "symbols", tuple(self.symbols))
        object.__setattr__(self, "dates", tuple(self.dates))
        object.__setattr__(self, "indicators", _freeze(self.indicators))
        object.__setattr__(self, "industry", MappingProxyType(dict(self.industry)))
        n, days, m = self.indicators.shape if self.indicators.ndim == 3 else (0, 0, 0)
        if self.indicators.ndim != 3:
            raise PanelError(f"indicators must be [stocks x days x features], got shape "
                             f"{self.indicators.shape}")
        if len(self.symbols) != n or len(self.dates) != days:
            raise PanelError("symbol/date axes do not match indicator array")
        if n < 2:
            raise InsufficientDataError(f"panel needs at least 2 stocks, got {n}")
        if m < 1:
            raise PanelError("panel needs at least 1 indicator")
        if not np.all(self.indicators[:, :, CLOSE_COLUMN] > 0):
            raise PanelError("close prices must be strictly positive")

    @property
    def n_stocks(self) -> int:
        return len(self.symbols)

    @property
    def n_days(self) -> int:
        return len(self.dates)

    @property
    def n_indicators(self) -> int:
        return self.indicators.shape[2]

    @property
    def close_prices(self) -> np.ndarray:
        """[N x days] close-price slice."""
        return self.indicators[:, :, CLOSE_COLUMN]


@dataclass(frozen=True)
class RelationMatrix:
    """Symmetric, normalized stock-relation weights aligned to panel symbols."""

    values: np.ndarray  # [N, N]
    kind: str  # "industry" | "identity"

    def __post_init__(self):
        object.__setattr__(self, "values", _freeze(self.values))
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise PanelError(f"relation matrix must be square, got {v.shape}")
        if not np.allclose(v, v.T, atol=1e-12):
            raise PanelError("relation matrix must be symmetric")
        if v.min() < 0 or v.max() > 1:
            raise PanelError("relation entries must lie in [0, 1]")
        if np.any(np.diag(v) <= 0):
            raise PanelError("normalized relation matrix needs positive diagonal (self-loops)")


@dataclass(frozen=True)
class WindowSample:
    """One training example anchored at day index ``anchor``."""

    anchor: int
    history: np.ndarray  # [N, L, M] z-scored over the lookback
    future_trend: np.ndarray  # [N, T] day-over-day up bits
    label: np.ndarray  # [N] horizon label
    label_per_day: np.ndarray | None = None  # [N, T]

    def __post_init__(self):
        object.__setattr__(self, "history", _freeze(self.history))
        for name in ("future_trend", "label", "label_per_day"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.ascontiguousarray(arr, dtype=np.uint8)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class RegimeEvent:
    """Persistent sector drift change: from ``day`` on, the sector's daily
    log-return drift moves by ``drift_shift``."""

    day: int
    sector: int
    drift_shift: float


@dataclass(frozen=True)
class SyntheticSpec:
    n_stocks: int = 64
    n_days: int = 800
    n_sectors: int = 4
    regime_schedule: tuple[RegimeEvent, ...] = ()
    base_vol: float = 0.01
    base_drift: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "regime_schedule",
                           tuple(RegimeEvent(*e) if not isinstance(e, RegimeEvent) else e
                                 for e in self.regime_schedule))
        problems = []
        if self.n_stocks < 2:
            problems.append("n_stocks must be >= 2")
        if self.n_days < 2:
            problems.append("n_days must be >= 2")
        if not 1 <= self.n_sectors <= self.n_stocks:
            problems.append("need 1 <= n_sectors <= n_stocks")
        if self.base_vol <= 0:
            problems.append("base_vol must be positive")
        for ev in self.regime_schedule:
            if not 0 <= ev.day < self.n_days:
                problems.append(f"event day {ev.day} outside [0, {self.n_days})")
            if not 0 <= ev.sector < self.n_sectors:
                problems.append(f"event sector {ev.sector} outside [0, {self.n_sectors})")
        if problems:
            raise PanelError("invalid synthetic spec: " + "; ".join(problems))


# ---------------------------------------------------------------------------
# CSV ingestion / export

def _parse_price_rows(csv_path) -> dict[str, dict[str, tuple[float, ...]]]:
    per_symbol: dict[str, dict[str, tuple[float, ...]]] = {}
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != PRICE_HEADER:
            raise PanelFormatError(f"{csv_path}: line 1: expected header "
                                   f"{','.join(PRICE_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(PRICE_HEADER):
                raise PanelFormatError(f"{csv_path}: line {lineno}: expected "
                                       f"{len(PRICE_HEADER)} fields, got {len(row)}")
            symbol, date = row[0].strip(), row[1].strip()
            try:
                datetime.date.fromisoformat(date)
                values = tuple(float(v) for v in row[2:])
            except ValueError as exc:
                raise PanelFormatError(f"{csv_path}: line {lineno}: {exc}") from None
            if values[CLOSE_COLUMN] <= 0:
                raise PanelFormatError(f"{csv_path}: line {lineno}: non-positive close "
                                       f"price {values[CLOSE_COLUMN]} for {symbol}")
            days = per_symbol.setdefault(symbol, {})
            if date in days:
                raise PanelFormatError(f"{csv_path}: line {lineno}: duplicate row for "
                                       f"{symbol} on {date}")
            days[date] = values
    return per_symbol


def _parse_relations(relation_path) -> dict[str, str]:
    industry: dict[str, str] = {}
    with open(relation_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != RELATION_HEADER:
            raise PanelFormatError(f"{relation_path}: line 1: expected header "
                                   f"{','.join(RELATION_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise PanelFormatError(f"{relation_path}: line {lineno}: expected 2 fields, "
                                       f"got {len(row)}")
            industry[row[0].strip()] = row[1].strip()
    return industry


def load_panel(csv_path, relation_path) -> StockPanel:
    """Load a price CSV plus an industry CSV into a panel.

    The date axis is the union of all dates seen; any stock missing a day is
    dropped entirely.  Surviving symbols are sorted lexicographically.
    """
    per_symbol = _parse_price_rows(csv_path)
    industry = _parse_relations(relation_path)

    all_dates = sorted({d for days in per_symbol.values() for d in days})
    complete = sorted(s for s, days in per_symbol.items() if len(days) == len(all_dates))
    if len(complete) < 2:
        raise InsufficientDataError(
            f"{csv_path}: only {len(complete)} stock(s) cover all {len(all_dates)} "
            f"trading days; need at least 2")

    data = np.empty((len(complete), len(all_dates), len(INDICATOR_COLUMNS)))
    for i, sym in enumerate(complete):
        days = per_symbol[sym]
        for j, date in enumerate(all_dates):
            data[i, j] = days[date]
    tags = {s: industry[s] for s in complete if s in industry}
    return StockPanel(tuple(complete), tuple(all_dates), data, tags)


def export_panel(panel: StockPanel, csv_path, relation_path=None) -> None:
    """Write the panel back out in the load format, 10 significant digits."""
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PRICE_HEADER)
        for i, sym in enumerate(panel.symbols):
            for j, date in enumerate(panel.dates):
                writer.writerow([sym, date] + [f"{v:.10g}" for v in panel.indicators[i, j]])
    if relation_path is not None:
        with open(relation_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(RELATION_HEADER)
            for sym in panel.symbols:
                writer.writerow([sym, panel.industry.get(sym, "")])


# ---------------------------------------------------------------------------
# relation matrix

def build_relation(panel: StockPanel, kind: str = "industry") -> RelationMatrix:
    """Industry-match adjacency with self-loops, symmetrically normalized
    by D^{-1/2} A D^{-1/2}; or a bare identity matrix."""
    n = panel.n_stocks
    if kind == "identity":
        return RelationMatrix(np.eye(n), "identity")
    if kind != "industry":
        raise ValueError(f"unknown relation kind '{kind}'")

    missing = [s for s in panel.symbols if s not in panel.industry or not panel.industry[s]]
    if missing:
        raise PanelError(f"missing industry tag for symbol(s): {', '.join(missing)}")
    tags = [panel.industry[s] for s in panel.symbols]
    same = np.array([[1.0 if (i == j or tags[i] == tags[j]) else 0.0
                      for j in range(n)] for i in range(n)])
    deg = same.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    normalized = same * inv_sqrt[:, None] * inv_sqrt[None, :]
    return RelationMatrix(normalized, "industry")


# ---------------------------------------------------------------------------
# labels and windows

def _check_horizon(panel: StockPanel, t: int, horizon: int) -> None:
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if t < 0 or t + horizon >= panel.n_days:
        raise IndexError(f"anchor {t} with horizon {horizon} exceeds panel days "
                         f"[0, {panel.n_days})")


def make_labels(panel: StockPanel, t: int, horizon: int,
                delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Binary up-labels: 1 iff relative close gain over ``t`` strictly
    exceeds ``delta``.  Returns (horizon label at t+T, per-day labels for
    each day in (t, t+T])."""
    _check_horizon(panel, t, horizon)
    if delta < 0:
        raise ValueError("delta must be >= 0")
    close = panel.close_prices
    base = close[:, t]
    future = close[:, t + 1: t + horizon + 1]
    per_day = ((future - base[:, None]) / base[:, None] > delta).astype(np.uint8)
    return per_day[:, -1].copy(), per_day


def make_future_trend(panel: StockPanel, t: int, horizon: int) -> np.ndarray:
    """[N x T] bits; bit tau is 1 iff close rose from day t+tau to t+tau+1."""
    _check_horizon(panel, t, horizon)
    close = panel.close_prices
    segment = close[:, t: t + horizon + 1]
    return (segment[:, 1:] > segment[:, :-1]).astype(np.uint8)


def _zscore_lookback(raw: np.ndarray) -> np.ndarray:
    """Normalize [N, L, M] per stock-indicator using its own L days only."""
    mean = raw.mean(axis=1, keepdims=True)
    std = raw.std(axis=1, keepdims=True)
    std = np.where(std > 0, std, 1.0)
    return (raw - mean) / std


def windows(panel: StockPanel, lookback: int, horizon: int, delta: float,
            stride: int = 1, per_day_labels: bool = False) -> list[WindowSample]:
    """Chronological sliding windows with anchors in [L-1, days-T-1]."""
    if lookback < 1 or horizon < 1 or stride < 1:
        raise ValueError("lookback, horizon, and stride must all be >= 1")
    out: list[WindowSample] = []
    for t in range(lookback - 1, panel.n_days - horizon, stride):
        raw = panel.indicators[:, t - lookback + 1: t + 1, :]
        label, per_day = make_labels(panel, t, horizon, delta)
        out.append(WindowSample(
            anchor=t,
            history=_zscore_lookback(raw),
            future_trend=make_future_trend(panel, t, horizon),
            label=label,
            label_per_day=per_day if per_day_labels else None,
        ))
    return out


# ---------------------------------------------------------------------------
# synthetic regime-shift generator

def sector_assignments(spec: SyntheticSpec) -> np.ndarray:
    """Stock index -> sector index, round-robin; stable across runs."""
    return np.arange(spec.n_stocks) % spec.n_sectors


def sector_drifts(spec: SyntheticSpec) -> np.ndarray:
    """[n_sectors x n_days] daily log-return drift after applying every
    scheduled event cumulatively from its day onward."""
    drift = np.full((spec.n_sectors, spec.n_days), spec.base_drift)
    for ev in spec.regime_schedule:
        drift[ev.sector, ev.day:] += ev.drift_shift
    return drift


def generate_synthetic(spec: SyntheticSpec) -> StockPanel:
    """Geometric random-walk panel with sector-correlated shocks and
    scheduled persistent drift shifts.  Deterministic for a given seed."""
    rng = np.random.default_rng(spec.seed)
    n, days = spec.n_stocks, spec.n_days
    sectors = sector_assignments(spec)
    drift = sector_drifts(spec)[sectors]  # [N, days]

    sector_vol = 0.6 * spec.base_vol
    idio_vol = 0.8 * spec.base_vol
    shocks = rng.normal(0.0, sector_vol, size=(spec.n_sectors, days))
    noise = rng.normal(0.0, idio_vol, size=(n, days))
    log_ret = drift + shocks[sectors] + noise

    start = rng.uniform(20.0, 200.0, size=n)
    close = start[:, None] * np.exp(np.cumsum(log_ret, axis=1))

    gap_vol = 0.3 * spec.base_vol
    open_ = close * np.exp(rng.normal(0.0, gap_vol, size=(n, days)))
    hi_lo = np.abs(rng.normal(0.0, gap_vol, size=(2, n, days)))
    high = np.maximum(open_, close) * np.exp(hi_lo[0])
    low = np.minimum(open_, close) * np.exp(-hi_lo[1])
    volume = np.exp(rng.normal(np.log(1e6), 0.5, size=(n, days)))

    data = np.stack([open_, high, low, close, volume], axis=2)
    width = max(3, len(str(n - 1)))
    symbols = tuple(f"S{i:0{width}d}" for i in range(n))
    dates = _trading_dates(days)
    industry = {symbols[i]: f"SEC{sectors[i]}" for i in range(n)}
    return StockPanel(symbols, dates, data, industry)


def _trading_dates(days: int, start: str = "2018-01-01") -> tuple[str, ...]:
    """Consecutive weekdays starting at the first weekday on/after start."""
    d = datetime.date.fromisoformat(start)
    out = []
    while len(out) < days:
        if d.weekday() < 5:
            out.append(d.isoformat())
        d += datetime.timedelta(days=1)
    return tuple(out)
