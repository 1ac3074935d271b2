"""
Plain-text log reader.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import pandas as pd

from .metrics import _EPOCH, ReadResult

logger = logging.getLogger(__name__)


@dataclass
class RawLogLine:
    """
    One log message with its timestamp prefix removed.
    """

    timestamp: int
    """UTC seconds."""
    text: str
    """Unparsed message body."""


def read_logs(
    path: Union[str, Path], timestamp_format: str = "%Y-%m-%dT%H:%M:%S"
) -> ReadResult[RawLogLine]:
    """
    Read a log file where each line starts with a timestamp.

    The timestamp spans as many leading whitespace-separated tokens as
    `timestamp_format` has. Naive timestamps are taken as UTC and sub-second precision
    is truncated. Lines with an unparseable timestamp or an empty message are skipped
    and counted. File order is preserved.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Log file {path} does not exist")

    width = max(len(timestamp_format.split()), 1)
    prefixes = []
    texts = []
    with path.open(encoding="utf-8", errors="replace") as f:
        for line in f:
            parts = line.split(maxsplit=width)
            prefixes.append(" ".join(parts[:width]))
            texts.append(parts[width].strip() if len(parts) > width else "")

    result: ReadResult[RawLogLine] = ReadResult()
    if not prefixes:
        return result

    stamps = pd.to_datetime(
        pd.Series(prefixes), format=timestamp_format, errors="coerce", utc=True
    )
    seconds = ((stamps - _EPOCH) // pd.Timedelta(seconds=1)).astype("Int64")

    for lineno, (stamp, text) in enumerate(zip(seconds, texts), start=1):
        if pd.isna(stamp) or not text:
            result.skipped += 1
            logger.warning("Skipping log line %d of %s: bad timestamp or empty", lineno, path)
            continue
        result.items.append(RawLogLine(timestamp=int(stamp), text=text))

    if result.skipped:
        logger.warning("Skipped %d of %d log lines in %s", result.skipped, len(texts), path)
    return result
