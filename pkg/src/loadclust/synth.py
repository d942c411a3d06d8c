"""Labeled synthetic load populations for testing and benchmarks.

Each generator draws a stationary process x[t] (the dynamics we want the
pipeline to recover), then integrates it seasonally into a log-load
curve: the first day is a fixed daily pattern and every later slot adds
x on top of the value one day earlier, so the pipeline's daily seasonal
difference of the log loads reproduces x exactly.  The groups share the
same level and daily pattern; only their dynamics differ.
"""

from __future__ import annotations

from datetime import datetime, timezone

import numpy as np

from .ingest import LoadSeries

GROUPS = ("ar1", "seasonal_ma", "threshold")
DEFAULT_START = datetime(2013, 1, 1, tzinfo=timezone.utc)
_BURN_IN = 200


def ar1_process(rng, length: int, phi: float = 0.8, sigma: float = 0.25) -> np.ndarray:
    """AR(1): x[t] = phi * x[t-1] + eps."""
    eps = rng.standard_normal(length + _BURN_IN) * sigma
    x = np.empty(length + _BURN_IN)
    x[0] = eps[0]
    for t in range(1, len(x)):
        x[t] = phi * x[t - 1] + eps[t]
    return x[_BURN_IN:]


def seasonal_ma_process(
    rng, length: int, theta: float = 0.9, period: int = 48, sigma: float = 0.25
) -> np.ndarray:
    """Seasonal MA: x[t] = eps[t] + theta * eps[t - period]."""
    eps = rng.standard_normal(length + period) * sigma
    return eps[period:] + theta * eps[:-period]


def threshold_process(
    rng, length: int, phi_low: float = 0.6, phi_high: float = -0.6, sigma: float = 0.25
) -> np.ndarray:
    """Self-exciting threshold AR: the lag-1 coefficient flips sign with
    the sign of the previous value, producing asymmetric dynamics."""
    eps = rng.standard_normal(length + _BURN_IN) * sigma
    x = np.empty(length + _BURN_IN)
    x[0] = eps[0]
    for t in range(1, len(x)):
        phi = phi_low if x[t - 1] <= 0 else phi_high
        x[t] = phi * x[t - 1] + eps[t]
    return x[_BURN_IN:]


_GENERATORS = {
    "ar1": ar1_process,
    "seasonal_ma": seasonal_ma_process,
    "threshold": threshold_process,
}


def daily_pattern(period: int = 48, level: float = 0.0, amplitude: float = 0.6) -> np.ndarray:
    """Log-domain base day: a smooth evening-peaked shape."""
    t = np.arange(period)
    return level + amplitude * np.sin(2 * np.pi * (t - 10) / period)


def loads_from_dynamics(x: np.ndarray, period: int = 48) -> np.ndarray:
    """Integrate a stationary process into positive loads whose daily
    seasonal log difference equals x."""
    n = len(x) + period
    log_load = np.empty(n)
    log_load[:period] = daily_pattern(period)
    for day_offset in range(period, n, period):
        stop = min(day_offset + period, n)
        width = stop - day_offset
        log_load[day_offset:stop] = (
            log_load[day_offset - period : day_offset - period + width]
            + x[day_offset - period : day_offset - period + width]
        )
    return np.exp(log_load)


def make_series(
    group: str, index: int, days: int, seed: int, period: int = 48,
    start: datetime = DEFAULT_START,
) -> LoadSeries:
    """One synthetic meter: ``days`` full days of half-hourly loads."""
    if group not in _GENERATORS:
        raise ValueError(f"unknown group {group!r}; choose from {GROUPS}")
    length = days * period
    rng = np.random.default_rng([seed, GROUPS.index(group), index])
    kwargs = {"period": period} if group == "seasonal_ma" else {}
    x = _GENERATORS[group](rng, length - period, **kwargs)
    values = loads_from_dynamics(x, period=period)
    return LoadSeries(
        meter_id=f"{group}_{index:04d}",
        start=start,
        values=values,
        missing=np.zeros(length, dtype=bool),
        external_label=group,
    )


def generate_population(
    n_per_group: int, days: int, seed: int, groups=GROUPS, period: int = 48
) -> list[LoadSeries]:
    """A labeled mixed population, grouped then indexed, deterministic in
    (seed, group, index) so any subset reproduces identically."""
    series = []
    for group in groups:
        for i in range(n_per_group):
            series.append(make_series(group, i, days, seed, period=period))
    return series
