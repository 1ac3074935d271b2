"""
Aligned multi-modal series, metric normalization and sliding windows.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ffad.config import SplitConfig, WindowSpec
from ffad.errors import DataError
from ffad.ingest.blocks import TimeBlockIndex

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8
SPLITS = ("train", "test", "val")


@dataclass
class NormStats:
    """
    Per-metric mean and population standard deviation of the training split.
    """

    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> Dict[str, List[float]]:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: Mapping[str, Sequence[float]]) -> "NormStats":
        return cls(
            mean=np.asarray(data["mean"], dtype=np.float64),
            std=np.asarray(data["std"], dtype=np.float64),
        )


def fit_norm(metrics: np.ndarray) -> NormStats:
    """
    Fit z-score statistics. Standard deviations are floored at `STD_FLOOR`.
    """
    metrics = np.asarray(metrics, dtype=np.float64)
    if metrics.shape[0] == 0:
        raise DataError("Cannot fit normalization on an empty training split")
    std = metrics.std(axis=0)
    constant = std < STD_FLOOR
    if constant.any():
        logger.warning("Metric columns %s are constant on the training split", np.flatnonzero(constant).tolist())
    return NormStats(mean=metrics.mean(axis=0), std=np.maximum(std, STD_FLOOR))


def apply_norm(metrics: np.ndarray, stats: NormStats) -> np.ndarray:
    """
    Z-score `metrics` with fitted statistics. Not idempotent.
    """
    return (np.asarray(metrics, dtype=np.float64) - stats.mean) / stats.std


def build_log_occurrence(
    ids_by_block: Mapping[int, Sequence[int]], n_columns: int, count: int
) -> np.ndarray:
    """
    Binary `count x n_columns` matrix; entry `(t, k)` is 1 iff template `k` occurs at
    least once in block `t`.
    """
    out = np.zeros((count, n_columns), dtype=np.int8)
    for block, ids in ids_by_block.items():
        if not ids:
            continue
        ids = np.asarray(ids, dtype=np.int64)
        if ids.min() < 0 or ids.max() >= n_columns:
            raise DataError(
                f"Template id out of range [0, {n_columns}) in block {block}"
            )
        out[block, ids] = 1
    return out


@dataclass
class MultiModalSeries:
    """
    Time-aligned metric and log-occurrence matrices with optional block labels.
    """

    metrics: np.ndarray
    """T x n metric matrix."""
    log_occurrence: np.ndarray
    """T x n' binary occurrence matrix."""
    index: TimeBlockIndex
    labels: Optional[np.ndarray] = None
    """Length-T 0/1 labels."""
    metric_names: List[str] = field(default_factory=list)
    norm: Optional[NormStats] = None
    offset: int = 0
    """Block index of row 0 in the full series (non-zero for split views)."""

    def __post_init__(self):
        rows = {self.metrics.shape[0], self.log_occurrence.shape[0]}
        if self.labels is not None:
            rows.add(len(self.labels))
        if len(rows) != 1:
            raise DataError(f"Series members have mismatched row counts {sorted(rows)}")
        if self.log_occurrence.size and not np.isin(self.log_occurrence, (0, 1)).all():
            raise DataError("Log occurrence entries must be 0 or 1")

    def __len__(self) -> int:
        return self.metrics.shape[0]

    @property
    def n_metrics(self) -> int:
        return self.metrics.shape[1]

    @property
    def n_logs(self) -> int:
        return self.log_occurrence.shape[1]

    def slice(self, start: int, stop: int) -> "MultiModalSeries":
        """
        A view of rows `[start, stop)`.
        """
        return MultiModalSeries(
            metrics=self.metrics[start:stop],
            log_occurrence=self.log_occurrence[start:stop],
            index=self.index,
            labels=None if self.labels is None else self.labels[start:stop],
            metric_names=self.metric_names,
            norm=self.norm,
            offset=self.offset + start,
        )

    def normalized(self, stats: NormStats) -> "MultiModalSeries":
        return MultiModalSeries(
            metrics=apply_norm(self.metrics, stats),
            log_occurrence=self.log_occurrence,
            index=self.index,
            labels=self.labels,
            metric_names=self.metric_names,
            norm=stats,
            offset=self.offset,
        )

    def save(self, out_dir: Union[str, Path], extra: Optional[Dict] = None):
        """
        Persist as `metrics.csv`, `labels.csv`, `occurrence.jsonl` and `manifest.json`.
        """
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        names = self.metric_names or [f"m{ii}" for ii in range(self.n_metrics)]

        metrics = pd.DataFrame(self.metrics, columns=names)
        metrics.insert(0, "block", np.arange(len(self)) + self.offset)
        metrics.to_csv(out_dir / "metrics.csv", index=False, float_format="%.17g")

        if self.labels is not None:
            pd.DataFrame(
                {"block": np.arange(len(self)) + self.offset, "label": self.labels}
            ).to_csv(out_dir / "labels.csv", index=False)

        rows = [
            {"block": int(t) + self.offset, "templates": np.flatnonzero(row).tolist()}
            for t, row in enumerate(self.log_occurrence)
        ]
        pd.DataFrame(rows, columns=["block", "templates"]).to_json(
            out_dir / "occurrence.jsonl", orient="records", lines=True
        )

        manifest = {
            "blocks": len(self),
            "n_metrics": self.n_metrics,
            "n_logs": self.n_logs,
            "t0": self.index.t0,
            "dt": self.index.dt,
            "offset": self.offset,
            "metric_names": names,
            "norm": self.norm.to_dict() if self.norm is not None else None,
            "has_labels": self.labels is not None,
        }
        manifest.update(extra or {})
        with (out_dir / "manifest.json").open("w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, in_dir: Union[str, Path]) -> Tuple["MultiModalSeries", Dict]:
        """
        Load a series written by `save`. Returns the series and its manifest.
        """
        in_dir = Path(in_dir)
        manifest_path = in_dir / "manifest.json"
        if not manifest_path.is_file():
            raise FileNotFoundError(f"No preprocessed series manifest at {manifest_path}")
        with manifest_path.open() as f:
            manifest = json.load(f)

        count, n_logs = manifest["blocks"], manifest["n_logs"]
        metrics = pd.read_csv(in_dir / "metrics.csv", float_precision="round_trip")
        names = manifest["metric_names"]
        if list(metrics.columns) != ["block"] + names or len(metrics) != count:
            raise DataError(f"{in_dir / 'metrics.csv'} doesn't match its manifest")

        occurrence = np.zeros((count, n_logs), dtype=np.int8)
        occ_path = in_dir / "occurrence.jsonl"
        if count > 0:
            occ = pd.read_json(occ_path, lines=True, dtype=False)
            for block, ids in zip(occ["block"], occ["templates"]):
                if ids:
                    occurrence[int(block) - manifest["offset"], ids] = 1

        labels = None
        if manifest.get("has_labels"):
            labels = pd.read_csv(in_dir / "labels.csv")["label"].to_numpy(dtype=np.int8)

        series = cls(
            metrics=metrics[names].to_numpy(dtype=np.float64),
            log_occurrence=occurrence,
            index=TimeBlockIndex(
                t0=manifest["t0"], dt=manifest["dt"], count=manifest["offset"] + count
            ),
            labels=labels,
            metric_names=names,
            norm=NormStats.from_dict(manifest["norm"]) if manifest["norm"] else None,
            offset=manifest["offset"],
        )
        return series, manifest


def split_bounds(count: int, split: SplitConfig) -> Dict[str, Tuple[int, int]]:
    """
    Chronological block ranges for train, test and val, in that order.
    """
    train_end = int(round(count * split.train))
    test_end = int(round(count * (split.train + split.test)))
    return {
        "train": (0, train_end),
        "test": (train_end, test_end),
        "val": (test_end, count),
    }


@dataclass
class Window:
    """
    One sliding window `X^(i)` over blocks `[start, end]`.
    """

    index: int
    """Window number within its series."""
    start: int
    """First block (absolute)."""
    end: int
    """Last block (absolute, inclusive)."""
    metrics: np.ndarray
    """w x n view."""
    logs: np.ndarray
    """w x n' view."""
    label: int = -1
    """Largest block label in the window; -1 when the series is unlabeled."""


def make_windows(series: MultiModalSeries, spec: WindowSpec) -> List[Window]:
    """
    Cut windows ending at blocks `w-1, w-1+stride, ...`. A window is labeled 1 if any
    of its blocks is and -1 when the series carries no labels.
    """
    count, w = len(series), spec.w
    if count < w:
        raise DataError(
            f"Series has T={count} blocks, fewer than the window length w={w}"
        )

    windows = []
    for number, end in enumerate(range(w - 1, count, spec.stride)):
        start = end - w + 1
        label = -1
        if series.labels is not None:
            label = int(series.labels[start : end + 1].max())
        windows.append(
            Window(
                index=number,
                start=series.offset + start,
                end=series.offset + end,
                metrics=series.metrics[start : end + 1],
                logs=series.log_occurrence[start : end + 1],
                label=label,
            )
        )
    return windows


@dataclass
class WindowBatch:
    """
    Windows stacked along a leading batch axis.
    """

    metrics: np.ndarray
    """B x w x n."""
    logs: np.ndarray
    """B x w x n'."""
    labels: np.ndarray
    starts: np.ndarray

    def __len__(self) -> int:
        return self.metrics.shape[0]

    @property
    def inputs(self) -> np.ndarray:
        """
        B x w x (n + n') reconstruction target.
        """
        return np.concatenate([self.metrics, self.logs], axis=-1)


def stack_windows(windows: Sequence[Window], modalities: str = "both") -> WindowBatch:
    """
    Stack windows into float64 arrays. `modalities` drops the metric or log channels
    for single-modality runs.
    """
    if not windows:
        raise DataError("No windows to stack")
    metrics = np.stack([w.metrics for w in windows]).astype(np.float64)
    logs = np.stack([w.logs for w in windows]).astype(np.float64)
    if modalities == "metrics":
        logs = logs[..., :0]
    elif modalities == "logs":
        metrics = metrics[..., :0]
    return WindowBatch(
        metrics=metrics,
        logs=logs,
        labels=np.array([w.label for w in windows], dtype=np.int8),
        starts=np.array([w.start for w in windows], dtype=np.int64),
    )
