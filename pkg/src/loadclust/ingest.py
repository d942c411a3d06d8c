"""Reading ingestion: CSV parsing, half-hour grid alignment, missing-data policy.

Input format is a CSV with header ``meter_id,timestamp,kwh[,acorn_group]``
and ISO-8601 UTC timestamps (``YYYY-MM-DDTHH:MM:SSZ``).  Each meter becomes
one :class:`LoadSeries` on a 30-minute grid spanning that meter's own first
to last reading; grid slots with no reading are flagged missing.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Iterable, Sequence

import numpy as np

from .errors import IngestError

log = logging.getLogger(__name__)

STEP = timedelta(minutes=30)
STEP_SECONDS = 1800
#: timestamps within this many seconds of a grid point are snapped to it
CLOCK_JITTER_SECONDS = 1


@dataclass(frozen=True)
class RawReading:
    """One accepted CSV row: energy for one half-hour slot of one meter."""

    meter_id: str
    timestamp: datetime
    kwh: float


@dataclass
class LoadSeries:
    """One meter's readings aligned to the 30-minute grid.

    ``values[t]`` is the kWh drawn in the half hour starting at
    ``start + t * step``; ``missing[t]`` is True where no reading exists.
    """

    meter_id: str
    start: datetime
    values: np.ndarray
    missing: np.ndarray
    step: timedelta = STEP
    external_label: str | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.missing = np.asarray(self.missing, dtype=bool)
        if self.values.shape != self.missing.shape:
            raise IngestError(
                f"meter {self.meter_id}: values/missing length mismatch"
            )

    def __len__(self) -> int:
        return len(self.values)

    @property
    def missing_fraction(self) -> float:
        return float(self.missing.sum()) / len(self.missing)

    def timestamp_at(self, index: int) -> datetime:
        return self.start + index * self.step


@dataclass
class RejectedRow:
    line: int
    reason: str


@dataclass
class ParseResult:
    series: list[LoadSeries]
    rejected: list[RejectedRow] = field(default_factory=list)


def _parse_timestamp(text: str) -> datetime:
    """Parse an ISO-8601 UTC instant, snapping ±1 s clock jitter to the grid."""
    try:
        ts = datetime.strptime(text, "%Y-%m-%dT%H:%M:%SZ")
    except ValueError:
        raise ValueError(f"bad timestamp {text!r}")
    ts = ts.replace(tzinfo=timezone.utc)
    residue = (ts.minute * 60 + ts.second) % STEP_SECONDS
    if residue == 0:
        return ts
    if residue <= CLOCK_JITTER_SECONDS:
        return ts - timedelta(seconds=residue)
    if STEP_SECONDS - residue <= CLOCK_JITTER_SECONDS:
        return ts + timedelta(seconds=STEP_SECONDS - residue)
    raise ValueError(f"timestamp {text!r} not on 30-minute grid")


def parse_readings(stream, rejected_report: list[RejectedRow] | None = None) -> list[LoadSeries]:
    """Parse a readings CSV into one aligned LoadSeries per meter.

    ``stream`` is a text file object, a path, or bytes.  Malformed rows are
    collected (with their 1-based line number) into ``rejected_report`` if
    given, and parsing continues.  Duplicate (meter, timestamp) keeps the
    last row and logs a warning.  Raises :class:`IngestError` when no valid
    rows remain.
    """
    close = False
    if isinstance(stream, (str, bytes)) and not isinstance(stream, bytes):
        stream = open(stream, "r", newline="")
        close = True
    elif isinstance(stream, bytes):
        stream = io.StringIO(stream.decode("utf-8"))

    rejected = rejected_report if rejected_report is not None else []
    # per meter: {timestamp: (kwh, label)}
    readings: dict[str, dict[datetime, float]] = {}
    labels: dict[str, str] = {}
    try:
        reader = csv.reader(stream)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError("no series: input is empty")
        header = [h.strip().lower() for h in header]
        required = ["meter_id", "timestamp", "kwh"]
        if header[: len(required)] != required:
            raise IngestError(
                f"bad header {header!r}, expected meter_id,timestamp,kwh[,acorn_group]"
            )
        has_label = len(header) > 3 and header[3] == "acorn_group"

        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 3:
                rejected.append(RejectedRow(lineno, "too few columns"))
                continue
            meter = row[0].strip()
            if not meter:
                rejected.append(RejectedRow(lineno, "empty meter_id"))
                continue
            try:
                ts = _parse_timestamp(row[1].strip())
            except ValueError as exc:
                rejected.append(RejectedRow(lineno, str(exc)))
                continue
            try:
                kwh = float(row[2])
            except ValueError:
                rejected.append(RejectedRow(lineno, f"bad kwh {row[2]!r}"))
                continue
            if not np.isfinite(kwh):
                rejected.append(RejectedRow(lineno, "non-finite kwh"))
                continue
            if kwh < 0:
                rejected.append(RejectedRow(lineno, "negative kwh"))
                continue
            per_meter = readings.setdefault(meter, {})
            if ts in per_meter:
                log.warning(
                    "duplicate reading for meter %s at %s (line %d), keeping last",
                    meter, ts.isoformat(), lineno,
                )
            per_meter[ts] = kwh
            if has_label and len(row) > 3 and row[3].strip():
                labels[meter] = row[3].strip()
    finally:
        if close:
            stream.close()

    if not readings:
        raise IngestError("no series: zero valid rows")

    series = []
    for meter in sorted(readings):
        per_meter = readings[meter]
        stamps = sorted(per_meter)
        start, end = stamps[0], stamps[-1]
        length = int((end - start) / STEP) + 1
        values = np.zeros(length, dtype=np.float64)
        missing = np.ones(length, dtype=bool)
        for ts, kwh in per_meter.items():
            idx = int((ts - start) / STEP)
            values[idx] = kwh
            missing[idx] = False
        series.append(
            LoadSeries(
                meter_id=meter,
                start=start,
                values=values,
                missing=missing,
                external_label=labels.get(meter),
            )
        )
    return series


def filter_by_missingness(
    series: Sequence[LoadSeries], max_missing_fraction: float
) -> tuple[list[LoadSeries], list[LoadSeries]]:
    """Split series into (kept, discarded) by missing-value fraction.

    A series is kept iff missing_count / length <= max_missing_fraction.
    Order is preserved and every input lands in exactly one list.
    """
    if not 0.0 <= max_missing_fraction <= 1.0:
        raise IngestError(
            f"max_missing_fraction must be in [0, 1], got {max_missing_fraction}"
        )
    kept, discarded = [], []
    for s in series:
        (kept if s.missing_fraction <= max_missing_fraction else discarded).append(s)
    return kept, discarded


def write_readings(series: Iterable[LoadSeries], path) -> None:
    """Serialize series back to the input CSV format (non-missing slots only)."""
    series = list(series)
    with_labels = any(s.external_label is not None for s in series)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["meter_id", "timestamp", "kwh"]
        if with_labels:
            header.append("acorn_group")
        writer.writerow(header)
        for s in series:
            for idx in np.flatnonzero(~s.missing):
                ts = s.timestamp_at(int(idx))
                row = [
                    s.meter_id,
                    ts.strftime("%Y-%m-%dT%H:%M:%SZ"),
                    repr(float(s.values[idx])),
                ]
                if with_labels:
                    row.append(s.external_label or "")
                writer.writerow(row)


def write_reject_report(rejected: Sequence[RejectedRow], path) -> None:
    """Write the rejected-row report as CSV ``line,reason``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["line", "reason"])
        for r in rejected:
            writer.writerow([r.line, r.reason])
