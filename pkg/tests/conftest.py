"""Shared fixtures: tiny hand-built panels and synthetic regime panels."""
import numpy as np
import pytest

from stockdistill.marketdata import (
    RegimeEvent,
    StockPanel,
    SyntheticSpec,
    generate_synthetic,
)


def build_panel(closes, industry=None, dates=None):
    """Panel from a [N x days] close matrix; other indicators derived."""
    closes = np.asarray(closes, dtype=np.float64)
    n, days = closes.shape
    open_ = closes * 0.99
    high = closes * 1.02
    low = closes * 0.97
    volume = np.full_like(closes, 1e6)
    data = np.stack([open_, high, low, closes, volume], axis=2)
    symbols = tuple(f"S{i:03d}" for i in range(n))
    if dates is None:
        base = np.datetime64("2020-01-01")
        dates = tuple(str(base + d) for d in range(days))
    tags = industry if industry is not None else {s: "TECH" for s in symbols}
    return StockPanel(symbols, tuple(dates), data, tags)


@pytest.fixture
def flat_panel():
    """4 stocks, 30 days, constant prices."""
    return build_panel(np.full((4, 30), 50.0))


@pytest.fixture
def trending_panel():
    """4 stocks: two rising, two falling, 40 days."""
    days = np.arange(40)
    closes = np.stack([
        100 * 1.01 ** days,
        80 * 1.005 ** days,
        120 * 0.99 ** days,
        60 * 0.995 ** days,
    ])
    return build_panel(closes)


def regime_spec(seed=0, n_stocks=16, n_days=300, n_sectors=2, shift=0.006,
                period=40, base_vol=0.004):
    """Alternating-sign drift events per sector: a strongly regimed market."""
    events = []
    sign = 1.0
    for day in range(period, n_days - period, period):
        for sec in range(n_sectors):
            events.append(RegimeEvent(day, sec, sign * shift * (1 if sec % 2 == 0 else -1)))
        sign = -sign
    return SyntheticSpec(n_stocks=n_stocks, n_days=n_days, n_sectors=n_sectors,
                         regime_schedule=tuple(events), base_vol=base_vol,
                         base_drift=0.0, seed=seed)


@pytest.fixture(scope="session")
def regime_panel():
    return generate_synthetic(regime_spec())
