"""
Readers for raw telemetry and bucketing into fixed-interval time blocks.
"""

from .blocks import Buckets, TimeBlockIndex, bucket
from .labels import read_labels, write_labels
from .logs import RawLogLine, read_logs
from .metrics import MetricSample, ReadResult, aggregate_metrics, read_metrics

__all__ = [
    "Buckets",
    "TimeBlockIndex",
    "bucket",
    "read_labels",
    "write_labels",
    "RawLogLine",
    "read_logs",
    "MetricSample",
    "ReadResult",
    "aggregate_metrics",
    "read_metrics",
]
