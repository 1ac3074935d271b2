from functools import cached_property
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd

from ffad.errors import DataError

SCORE_COLUMNS = [
    "window_index",
    "start_block",
    "end_block",
    "score",
    "label",
    "masked_fraction",
]


class ScoreTable(pd.DataFrame):
    """
    Per-window anomaly scores, one row per scored window.

    Columns: `window_index`, `start_block`, `end_block`, `score`, `label` (-1 when
    unlabeled), `masked_fraction` (share of frequency components gated in the window)
    and, once thresholded, `prediction`.
    """

    @cached_property
    def scores(self) -> np.ndarray:
        return self["score"].to_numpy(dtype=np.float64)

    @cached_property
    def labels(self) -> np.ndarray:
        return self["label"].to_numpy(dtype=np.int64)

    @cached_property
    def is_labeled(self) -> bool:
        return bool(len(self)) and bool((self["label"] >= 0).all())

    @cached_property
    def predictions(self) -> np.ndarray:
        """
        0/1 predictions. Raises `KeyError` before `with_predictions`.
        """
        return self["prediction"].to_numpy(dtype=np.int64)

    @cached_property
    def score_ratio(self) -> float:
        """
        Mean anomalous-window score over mean normal-window score. NaN unless both
        classes are present.
        """
        labels = self.labels
        if not (labels == 1).any() or not (labels == 0).any():
            return float("nan")
        normal = self.scores[labels == 0].mean()
        if normal == 0:
            return float("inf")
        return float(self.scores[labels == 1].mean() / normal)

    def with_predictions(self, threshold: float) -> "ScoreTable":
        """
        Copy of the table with `prediction = score > threshold`.
        """
        out = self.copy()
        out["prediction"] = (out["score"] > threshold).astype(np.int64)
        return out

    def to_csv_file(self, path: Union[str, Path], config_hash: Optional[str] = None):
        """
        Write as CSV, optionally tagging every row with the run's config hash.
        """
        df = pd.DataFrame(self)
        if config_hash is not None:
            df = df.assign(config_hash=config_hash)
        df.to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def from_scores(
        cls,
        scores: np.ndarray,
        starts: np.ndarray,
        window: int,
        labels: Optional[np.ndarray] = None,
        masked_fraction: Optional[np.ndarray] = None,
    ) -> "ScoreTable":
        count = len(scores)
        starts = np.asarray(starts, dtype=np.int64)
        return cls(
            {
                "window_index": np.arange(count, dtype=np.int64),
                "start_block": starts,
                "end_block": starts + window - 1,
                "score": np.asarray(scores, dtype=np.float64),
                "label": (
                    np.full(count, -1, dtype=np.int64)
                    if labels is None
                    else np.asarray(labels, dtype=np.int64)
                ),
                "masked_fraction": (
                    np.zeros(count) if masked_fraction is None else masked_fraction
                ),
            },
            columns=SCORE_COLUMNS,
        )

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "ScoreTable":
        """
        Read a table written by `to_csv_file`.
        """
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"Score table {path} does not exist")
        df = pd.read_csv(path, float_precision="round_trip")
        missing = [col for col in SCORE_COLUMNS if col not in df.columns]
        if missing:
            raise DataError(f"Score table {path} is missing columns {missing}")
        return cls(df.drop(columns=["config_hash"], errors="ignore"))

    @property
    def _constructor(self):
        # Makes sure that dataframe slices return a subclass instance
        # https://pandas.pydata.org/docs/development/extending.html#override-constructor-properties
        return ScoreTable
