"""
Metric CSV reader and block aggregation.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Generic, List, Optional, Sequence, TypeVar, Union

import numpy as np
import pandas as pd

from ffad.errors import DataError

from .blocks import TimeBlockIndex, bucket

logger = logging.getLogger(__name__)

T = TypeVar("T")

# Numeric timestamps at or above this value are read as epoch milliseconds.
_MILLIS_CUTOFF = 10**11
_EPOCH = pd.Timestamp("1970-01-01", tz="UTC")


@dataclass
class MetricSample:
    """
    One metric row. Missing values are `nan`.
    """

    timestamp: int
    """UTC seconds."""
    values: np.ndarray
    """One value per metric, in schema order."""


@dataclass
class ReadResult(Generic[T]):
    """
    Parsed items and the number of rejected rows/cells.
    """

    items: List[T] = field(default_factory=list)
    skipped: int = 0
    """Rows or lines rejected outright."""
    gaps: int = 0
    """Cells recorded as missing."""


def parse_timestamps(values: pd.Series) -> pd.Series:
    """
    Convert epoch seconds, epoch milliseconds or ISO-8601 strings to integer UTC
    seconds. Each cell is parsed on its own, so a column mixing numbers and date
    strings keeps both. Unparseable entries become `NA`.
    """
    numeric = pd.to_numeric(values, errors="coerce")
    numeric = numeric.where(numeric < _MILLIS_CUTOFF, numeric / 1000)
    seconds = np.floor(numeric).astype("Int64")

    text = numeric.isna()
    if text.any():
        stamps = pd.to_datetime(values[text], errors="coerce", utc=True)
        seconds[text] = ((stamps - _EPOCH) // pd.Timedelta(seconds=1)).astype("Int64")
        if stamps.notna().any() and not text.all():
            logger.warning(
                "Timestamp column mixes epoch numbers (%d) and date strings (%d)",
                int((~text).sum()),
                int(stamps.notna().sum()),
            )
    return seconds


def read_metrics(
    path: Union[str, Path], schema: Optional[Sequence[str]] = None
) -> ReadResult[MetricSample]:
    """
    Read a metrics CSV.

    Args:
        path: CSV path; first column `timestamp`, then one column per metric.
        schema: expected metric names in order. Defaults to the header.

    Returns:
        A `ReadResult` of `MetricSample`s in file order. Cells that don't parse as
        numbers (including `NaN`) are gaps; rows with a bad timestamp are skipped.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Metrics file {path} does not exist")

    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError as exc:
        raise DataError(f"Metrics file {path} has no header") from exc

    columns = list(df.columns)
    if not columns or columns[0] != "timestamp":
        raise DataError(f"Metrics file {path}: first column must be 'timestamp'")
    names = columns[1:]
    if schema is not None and list(schema) != names:
        raise DataError(
            f"Metrics file {path}: header {names} doesn't match schema {list(schema)}"
        )

    stamps = parse_timestamps(df["timestamp"])
    values = df[names].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=np.float64)
    result: ReadResult[MetricSample] = ReadResult()

    bad_rows = stamps.isna().to_numpy()
    if bad_rows.any():
        result.skipped = int(bad_rows.sum())
        logger.warning(
            "Skipped %d metric rows with unparseable timestamps in %s",
            result.skipped,
            path,
        )

    for row, (stamp, bad) in enumerate(zip(stamps, bad_rows)):
        if bad:
            continue
        row_values = values[row]
        missing = ~np.isfinite(row_values)
        if missing.any():
            result.gaps += int(missing.sum())
            logger.warning(
                "Metric gap at row %d of %s: %s",
                row + 1,
                path,
                [names[i] for i in np.flatnonzero(missing)],
            )
            row_values = np.where(missing, np.nan, row_values)
        result.items.append(MetricSample(timestamp=int(stamp), values=row_values))
    return result


def aggregate_metrics(
    samples: Sequence[MetricSample], index: TimeBlockIndex, n_metrics: int
) -> np.ndarray:
    """
    Average samples per block and forward-fill gaps into a dense `T x n` matrix.

    A gap before the first observed value of a metric takes that first value. A metric
    that is never observed is filled with zeros.
    """
    buckets = bucket(samples, index)
    out = np.full((index.count, n_metrics), np.nan)
    for block, items in buckets.items.items():
        stacked = np.stack([s.values for s in items])
        observed = np.isfinite(stacked)
        counts = observed.sum(axis=0)
        sums = np.where(observed, stacked, 0.0).sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            out[block] = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)

    frame = pd.DataFrame(out).ffill().bfill()
    empty = frame.columns[frame.isna().all()].tolist()
    if empty and index.count > 0:
        logger.warning("Metrics %s have no observed values; filled with 0", empty)
    return frame.fillna(0.0).to_numpy(dtype=np.float64)
