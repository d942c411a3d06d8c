"""Log transform, short-gap imputation and daily seasonal differencing.

The clustering features are computed on the seasonally differenced
log loads: with half-hourly data and daily period 48, the working series
is ``x[t] = log(load[t + 48]) - log(load[t])``, which removes both the
consumption level and the daily cycle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PreprocessError
from .ingest import LoadSeries

#: kWh floor applied under zero_policy="floor"
DEFAULT_FLOOR = 1e-3
#: longest run of consecutive missing values bridged by linear interpolation
DEFAULT_MAX_GAP = 3


@dataclass
class LogSeries:
    meter_id: str
    values: np.ndarray
    missing: np.ndarray

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class DiffSeries:
    """Seasonally differenced log-load series."""

    meter_id: str
    values: np.ndarray
    missing: np.ndarray
    period: int = 48

    def __len__(self) -> int:
        return len(self.values)

    @property
    def observed(self) -> np.ndarray:
        """Non-missing values, in order."""
        return self.values[~self.missing]


def log_transform(
    series: LoadSeries, zero_policy: str = "missing", floor: float = DEFAULT_FLOOR
) -> LogSeries:
    """Natural log of the load values, with a declared policy for zeros.

    zero_policy "missing" treats an exact 0 kWh reading as an outage and
    marks the slot missing; "floor" clamps values below ``floor`` up to it
    so the log stays finite.
    """
    if zero_policy not in ("missing", "floor"):
        raise PreprocessError(f"unknown zero_policy {zero_policy!r}")
    if floor <= 0:
        raise PreprocessError("floor must be > 0")

    values = series.values
    missing = series.missing.copy()
    observed = ~missing
    bad = observed & ~np.isfinite(values)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise PreprocessError(
            f"meter {series.meter_id}: non-finite value at index {idx}"
        )
    if (observed & (values < 0)).any():
        idx = int(np.flatnonzero(observed & (values < 0))[0])
        raise PreprocessError(
            f"meter {series.meter_id}: negative value at index {idx}"
        )

    out = np.zeros_like(values)
    if zero_policy == "missing":
        missing = missing | (observed & (values == 0.0))
        keep = ~missing
        out[keep] = np.log(values[keep])
    else:
        out[observed] = np.log(np.maximum(values[observed], floor))
    return LogSeries(series.meter_id, out, missing)


def impute_short_gaps(series: LogSeries, max_gap: int = DEFAULT_MAX_GAP) -> LogSeries:
    """Linearly interpolate missing runs of length <= max_gap.

    Only interior runs with observed neighbors on both sides are bridged;
    longer runs and runs touching either boundary stay missing.  Observed
    values are never changed.
    """
    if max_gap < 0:
        raise PreprocessError("max_gap must be >= 0")
    values = series.values.copy()
    missing = series.missing.copy()
    if max_gap == 0 or not missing.any():
        return LogSeries(series.meter_id, values, missing)

    n = len(values)
    i = 0
    while i < n:
        if not missing[i]:
            i += 1
            continue
        j = i
        while j < n and missing[j]:
            j += 1
        run = j - i
        if i > 0 and j < n and run <= max_gap:
            left, right = values[i - 1], values[j]
            for k in range(run):
                values[i + k] = left + (right - left) * (k + 1) / (run + 1)
            missing[i:j] = False
        i = j
    return LogSeries(series.meter_id, values, missing)


def seasonal_difference(series: LogSeries, period: int = 48) -> DiffSeries:
    """Difference out the seasonal cycle: ``out[t] = x[t + period] - x[t]``.

    The output entry is missing iff either operand is.  The output is
    shorter than the input by ``period``.
    """
    if period < 1:
        raise PreprocessError("period must be >= 1")
    n = len(series)
    if n <= period:
        raise PreprocessError(
            f"meter {series.meter_id}: length {n} <= period {period}"
        )
    values = series.values[period:] - series.values[:-period]
    missing = series.missing[period:] | series.missing[:-period]
    values = values.copy()
    values[missing] = 0.0
    return DiffSeries(series.meter_id, values, missing, period=period)
