"""
Reconstruction-error scoring, threshold selection and window-level evaluation.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from ffad.config import ModelConfig
from ffad.errors import DataError, NumericError
from ffad.model import ModelParams, forward
from ffad.series import WindowBatch
from ffad.table import ScoreTable

logger = logging.getLogger(__name__)


def score_windows(
    batch: WindowBatch,
    params: ModelParams,
    config: ModelConfig,
    chunk: int = 64,
) -> Tuple[ScoreTable, np.ndarray]:
    """
    Score every window by its mean squared reconstruction error, noise off.

    Returns:
        The score table and, per frequency component, the fraction of scored windows in
        which that component was gated.
    """
    if len(batch) == 0:
        return ScoreTable.from_scores(np.zeros(0), np.zeros(0), config.window), np.zeros(
            config.nodes
        )
    if batch.metrics.shape[1:] != (config.window, config.metric_channels) or batch.logs.shape[
        1:
    ] != (config.window, config.log_channels):
        raise DataError(
            f"Windows of shape {batch.metrics.shape[1:]} / {batch.logs.shape[1:]} don't "
            f"match the checkpoint (w={config.window}, n={config.metric_channels}, "
            f"n'={config.log_channels})"
        )

    scores, fractions = [], []
    mask_counts = np.zeros(config.nodes)
    for lo in range(0, len(batch), chunk):
        result = forward(
            batch.metrics[lo : lo + chunk], batch.logs[lo : lo + chunk], params, config
        )
        scores.append(result.errors)
        if result.stats is not None:
            fractions.append(result.stats.masked_fraction)
            mask_counts += result.stats.mask.sum(axis=0)
        else:
            fractions.append(np.zeros(len(result.errors)))

    scores = np.concatenate(scores)
    if not np.isfinite(scores).all():
        bad = int(np.flatnonzero(~np.isfinite(scores))[0])
        raise NumericError(f"Non-finite anomaly score for window {bad}")

    table = ScoreTable.from_scores(
        scores,
        batch.starts,
        config.window,
        labels=batch.labels,
        masked_fraction=np.concatenate(fractions),
    )
    return table, mask_counts / len(batch)


def _cut_f1(scores: np.ndarray, labels: np.ndarray, cuts: np.ndarray) -> np.ndarray:
    """
    F1 of `score > cut` for every cut.
    """
    order = np.argsort(scores, kind="stable")
    s, y = scores[order], labels[order]
    # suffix[j] = positives among the windows at sorted positions j..end
    suffix = np.concatenate([np.cumsum(y[::-1])[::-1], [0]])
    first_above = np.searchsorted(s, cuts, side="right")
    predicted = len(s) - first_above
    tp = suffix[first_above]
    fp = predicted - tp
    fn = y.sum() - tp
    denom = 2 * tp + fp + fn
    return np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)


def candidate_cuts(scores: np.ndarray) -> np.ndarray:
    """
    Cuts just below the lowest score and at midpoints of sorted unique scores.
    """
    unique = np.unique(scores)
    if len(unique) == 0:
        return unique
    below = np.nextafter(unique[0], -np.inf)
    return np.concatenate([[below], (unique[:-1] + unique[1:]) / 2])


def select_threshold(
    scores: Sequence[float],
    labels: Sequence[int],
    policy: str = "best-f1",
    fallback_percentile: float = 99.0,
) -> Tuple[float, str]:
    """
    Choose a decision threshold on validation scores; windows with `score > threshold`
    are flagged.

    Args:
        policy: `best-f1` maximizes F1 over candidate cuts, breaking ties toward the
            lower threshold; `percentile:<x>` takes the x-th percentile of the scores.
        fallback_percentile: used by `best-f1` when the labels hold a single class.

    Returns:
        The threshold and the name of the policy actually applied.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(scores) == 0:
        raise DataError("Cannot select a threshold without validation scores")
    if len(labels) != len(scores):
        raise DataError(f"{len(scores)} scores but {len(labels)} labels")

    if policy.startswith("percentile:"):
        return float(np.percentile(scores, float(policy.split(":", 1)[1]))), policy
    if policy != "best-f1":
        raise ValueError(f"Unknown threshold policy {policy!r}")

    if labels.min() == labels.max():
        logger.warning(
            "Validation labels are all %d; falling back to percentile:%g",
            labels[0],
            fallback_percentile,
        )
        fallback = f"percentile:{fallback_percentile:g}"
        return float(np.percentile(scores, fallback_percentile)), fallback

    cuts = candidate_cuts(scores)
    f1 = _cut_f1(scores, labels, cuts)
    best = int(np.argmax(f1))
    logger.info("best-f1 threshold %.6g (validation F1 %.4f)", cuts[best], f1[best])
    return float(cuts[best]), policy


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def f1_score(precision: float, recall: float) -> float:
    return _ratio(2 * precision * recall, precision + recall)


@dataclass
class EvalReport:
    """
    Window-level confusion counts and derived scores.
    """

    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    threshold: Optional[float] = None
    policy: str = ""

    @classmethod
    def from_counts(
        cls, tp: int, fp: int, fn: int, tn: int = 0, threshold: Optional[float] = None, policy: str = ""
    ) -> "EvalReport":
        precision = _ratio(tp, tp + fp)
        recall = _ratio(tp, tp + fn)
        return cls(
            tp=int(tp),
            fp=int(fp),
            fn=int(fn),
            tn=int(tn),
            precision=precision,
            recall=recall,
            f1=f1_score(precision, recall),
            threshold=threshold,
            policy=policy,
        )

    @classmethod
    def from_rates(cls, precision: float, recall: float) -> "EvalReport":
        """
        Report for a published precision/recall pair; counts are unknown (zero).
        """
        for name, value in (("precision", precision), ("recall", recall)):
            if not 0 <= value <= 1:
                raise ValueError(f"{name}={value} must be in [0, 1]")
        return cls(0, 0, 0, 0, precision, recall, f1_score(precision, recall), policy="rates")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def evaluate(
    predictions: Sequence[int],
    labels: Sequence[int],
    threshold: Optional[float] = None,
    policy: str = "",
) -> EvalReport:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise DataError(f"{len(predictions)} predictions but {len(labels)} labels")
    tp = int(((predictions == 1) & (labels == 1)).sum())
    fp = int(((predictions == 1) & (labels == 0)).sum())
    fn = int(((predictions == 0) & (labels == 1)).sum())
    tn = int(((predictions == 0) & (labels == 0)).sum())
    return EvalReport.from_counts(tp, fp, fn, tn, threshold=threshold, policy=policy)


@dataclass
class ZScoreBaseline:
    """
    Naive detector: a window's score is the largest absolute z-score of one metric
    channel inside it. Channel and threshold are chosen on validation by best F1.
    """

    channel: int
    threshold: float
    val_f1: float

    @staticmethod
    def channel_scores(metrics: np.ndarray, channel: int) -> np.ndarray:
        """
        Max `|z|` of `channel` per window; `metrics` is `(B, w, n)` z-scored data.
        """
        return np.abs(metrics[:, :, channel]).max(axis=1)

    @classmethod
    def fit(cls, val: WindowBatch) -> Optional["ZScoreBaseline"]:
        """
        Returns `None` when there are no metric channels or the labels hold a single
        class.
        """
        if len(val) == 0 or val.metrics.shape[-1] == 0:
            return None
        labels = val.labels.astype(np.int64)
        if labels.min() == labels.max():
            logger.warning("Single-class validation labels; z-score baseline skipped")
            return None

        best: Optional[ZScoreBaseline] = None
        for channel in range(val.metrics.shape[-1]):
            scores = cls.channel_scores(val.metrics, channel)
            cuts = candidate_cuts(scores)
            f1 = _cut_f1(scores, labels, cuts)
            k = int(np.argmax(f1))
            if best is None or f1[k] > best.val_f1:
                best = cls(channel=channel, threshold=float(cuts[k]), val_f1=float(f1[k]))
        logger.info(
            "z-score baseline: channel %d threshold %.4g (validation F1 %.4f)",
            best.channel,
            best.threshold,
            best.val_f1,
        )
        return best

    def predict(self, batch: WindowBatch) -> np.ndarray:
        scores = self.channel_scores(batch.metrics, self.channel)
        return (scores > self.threshold).astype(np.int64)

    def evaluate(self, batch: WindowBatch) -> EvalReport:
        return evaluate(
            self.predict(batch), batch.labels, threshold=self.threshold, policy="zscore"
        )
