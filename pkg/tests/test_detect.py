import logging
from pathlib import Path

import numpy as np
import pytest

from ffad.config import ModelConfig
from ffad.detect import (
    EvalReport,
    ZScoreBaseline,
    _cut_f1,
    candidate_cuts,
    evaluate,
    f1_score,
    score_windows,
    select_threshold,
)
from ffad.errors import DataError
from ffad.model import ModelParams, forward
from ffad.series import WindowBatch
from ffad.table import ScoreTable

MODEL = ModelConfig(window=4, metric_channels=2, log_channels=2, embed_dim=4, layers=2)


def _batch(count: int, labels=None, seed: int = 0) -> WindowBatch:
    rng = np.random.default_rng(seed)
    return WindowBatch(
        metrics=rng.normal(size=(count, 4, 2)),
        logs=(rng.random((count, 4, 2)) < 0.3).astype(float),
        labels=np.zeros(count, dtype=np.int8) if labels is None else np.asarray(labels, dtype=np.int8),
        starts=np.arange(10, 10 + count, dtype=np.int64),
    )


@pytest.mark.parametrize(
    "precision,recall,expected",
    [(0.904, 0.965, 0.934), (0.925, 1.0, 0.961), (0.841, 1.0, 0.914)],
)
def test_published_rates(precision, recall, expected):
    assert f1_score(precision, recall) == pytest.approx(expected, abs=5e-4)
    report = EvalReport.from_rates(precision, recall)
    assert report.f1 == pytest.approx(expected, abs=5e-4)
    assert report.policy == "rates"


def test_rates_validation():
    with pytest.raises(ValueError, match="precision"):
        EvalReport.from_rates(1.2, 0.5)
    with pytest.raises(ValueError, match="recall"):
        EvalReport.from_rates(0.5, -0.1)
    assert f1_score(0.0, 0.0) == 0.0


def test_evaluate_counts():
    report = evaluate([1, 1, 0, 0, 1], [1, 0, 1, 0, 1], threshold=0.5, policy="best-f1")
    assert (report.tp, report.fp, report.fn, report.tn) == (2, 1, 1, 1)
    assert report.precision == pytest.approx(2 / 3)
    assert report.recall == pytest.approx(2 / 3)
    assert report.f1 == pytest.approx(2 / 3)
    assert report.to_dict()["threshold"] == 0.5

    silent = evaluate([0, 0, 0], [0, 1, 1])
    assert (silent.precision, silent.recall, silent.f1) == (0.0, 0.0, 0.0)

    with pytest.raises(DataError):
        evaluate([0, 1], [0, 1, 1])


def test_candidate_cuts():
    cuts = candidate_cuts(np.array([0.3, 0.1, 0.3, 0.2]))
    assert cuts[0] < 0.1 and cuts[0] == np.nextafter(0.1, -np.inf)
    np.testing.assert_allclose(cuts[1:], [0.15, 0.25])
    assert len(candidate_cuts(np.zeros(0))) == 0


@pytest.mark.parametrize("seed", range(3))
def test_cut_f1_matches_brute_force(seed: int):
    rng = np.random.default_rng(seed)
    scores = np.round(rng.random(40), 1)
    labels = (rng.random(40) < 0.3).astype(np.int64)
    cuts = candidate_cuts(scores)
    fast = _cut_f1(scores, labels, cuts)
    for cut, value in zip(cuts, fast):
        report = evaluate((scores > cut).astype(int), labels)
        assert value == pytest.approx(report.f1)


@pytest.mark.parametrize(
    "scores,labels,expected",
    [
        ([0.1, 0.2, 0.3, 0.4], [0, 0, 1, 1], 0.25),
        ([1.0, 2.0, 3.0], [0, 1, 0], 1.5),
        ([1.0, 1.0, 2.0], [0, 1, 1], np.nextafter(1.0, -np.inf)),
        # F1 ties between the lowest and highest cuts; the lower one wins
        ([1.0, 2.0, 3.0, 4.0], [1, 0, 0, 1], np.nextafter(1.0, -np.inf)),
    ],
)
def test_best_f1_threshold(scores, labels, expected):
    threshold, policy = select_threshold(scores, labels)
    assert threshold == expected
    assert policy == "best-f1"


def test_percentile_threshold():
    threshold, policy = select_threshold([1.0, 2.0, 3.0, 4.0], [0, 0, 0, 1], "percentile:50")
    assert threshold == 2.5
    assert policy == "percentile:50"


@pytest.mark.parametrize("labels", [[0, 0, 0, 0], [-1, -1, -1, -1], [1, 1, 1, 1]])
def test_single_class_fallback(labels, caplog: pytest.LogCaptureFixture):
    scores = np.arange(1.0, 5.0)
    with caplog.at_level(logging.WARNING):
        threshold, policy = select_threshold(scores, labels, fallback_percentile=99.0)
    assert policy == "percentile:99"
    assert threshold == pytest.approx(np.percentile(scores, 99.0))
    assert "falling back" in caplog.text


def test_threshold_errors():
    with pytest.raises(DataError):
        select_threshold([], [])
    with pytest.raises(DataError):
        select_threshold([1.0, 2.0], [0])
    with pytest.raises(ValueError):
        select_threshold([1.0, 2.0], [0, 1], "median")


def test_score_table(tmp_path: Path):
    table = ScoreTable.from_scores(
        np.array([1.0, 3.0, 6.0]), np.array([0, 1, 2]), window=5, labels=np.array([0, 0, 1])
    )
    assert table["end_block"].tolist() == [4, 5, 6]
    assert table.is_labeled
    assert table.score_ratio == pytest.approx(3.0)
    assert isinstance(table.iloc[:2], ScoreTable)

    predicted = table.with_predictions(2.0)
    assert predicted.predictions.tolist() == [0, 1, 1]
    assert "prediction" not in table.columns

    path = tmp_path / "scores.csv"
    predicted.to_csv_file(path, config_hash="cafe")
    loaded = ScoreTable.from_csv(path)
    assert "config_hash" not in loaded.columns
    np.testing.assert_array_equal(loaded.scores, predicted.scores)
    assert loaded.predictions.tolist() == [0, 1, 1]

    unlabeled = ScoreTable.from_scores(np.array([1.0, 2.0]), np.array([0, 1]), window=2)
    assert not unlabeled.is_labeled
    assert np.isnan(unlabeled.score_ratio)

    (tmp_path / "bad.csv").write_text("score\n1.0\n")
    with pytest.raises(DataError, match="missing columns"):
        ScoreTable.from_csv(tmp_path / "bad.csv")


def test_score_windows():
    params = ModelParams.init(MODEL, seed=0)
    batch = _batch(7, labels=[0, 0, 0, 1, 1, 0, 0])
    table, mask_rates = score_windows(batch, params, MODEL, chunk=3)

    expected = forward(batch.metrics, batch.logs, params, MODEL).errors
    np.testing.assert_allclose(table.scores, expected, rtol=1e-12)
    assert table["start_block"].tolist() == list(range(10, 17))
    assert table["end_block"].tolist() == list(range(13, 20))
    assert table.labels.tolist() == [0, 0, 0, 1, 1, 0, 0]
    assert mask_rates.shape == (MODEL.nodes,)
    assert ((mask_rates >= 0) & (mask_rates <= 1)).all()
    assert ((table["masked_fraction"] >= 0) & (table["masked_fraction"] <= 1)).all()

    # scoring is deterministic and independent of the chunk size
    again, _ = score_windows(batch, params, MODEL, chunk=64)
    np.testing.assert_allclose(again.scores, table.scores, rtol=1e-12)


def test_score_windows_edge_cases():
    params = ModelParams.init(MODEL, seed=0)
    empty = WindowBatch(
        metrics=np.zeros((0, 4, 2)),
        logs=np.zeros((0, 4, 2)),
        labels=np.zeros(0, dtype=np.int8),
        starts=np.zeros(0, dtype=np.int64),
    )
    table, rates = score_windows(empty, params, MODEL)
    assert len(table) == 0
    assert rates.shape == (MODEL.nodes,)

    wrong = _batch(2)
    wrong.logs = wrong.logs[..., :1]
    with pytest.raises(DataError, match="checkpoint"):
        score_windows(wrong, params, MODEL)


def test_zscore_baseline(caplog: pytest.LogCaptureFixture):
    labels = np.array([0, 0, 1, 0, 1, 0, 0, 0])
    batch = _batch(8, labels=labels)
    batch.metrics = np.clip(batch.metrics, -1.0, 1.0)
    batch.metrics[labels == 1, 2, 1] = 5.0

    baseline = ZScoreBaseline.fit(batch)
    assert baseline is not None
    assert baseline.channel == 1
    assert baseline.val_f1 == 1.0
    assert 1.0 <= baseline.threshold < 5.0
    assert baseline.predict(batch).tolist() == labels.tolist()
    report = baseline.evaluate(batch)
    assert report.f1 == 1.0
    assert report.policy == "zscore"

    with caplog.at_level(logging.WARNING):
        assert ZScoreBaseline.fit(_batch(4)) is None
    assert "Single-class" in caplog.text

    no_metrics = _batch(4, labels=[0, 1, 0, 1])
    no_metrics.metrics = no_metrics.metrics[..., :0]
    assert ZScoreBaseline.fit(no_metrics) is None


if __name__ == "__main__":
    pytest.main([__file__])
