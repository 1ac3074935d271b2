import json
import logging
from pathlib import Path

import pandas as pd
import pytest

from ffad import __main__ as cli
from ffad import pipeline
from ffad.config import IngestConfig, RunConfig, load_profile
from ffad.errors import OutputExistsError
from ffad.table import ScoreTable

TINY_CONFIG = """
window:
  w: 8
model:
  embed_dim: 4
  layers: 1
train:
  batch_size: 32
  micro_batch: 16
  max_epochs: 2
  patience: 2
synth:
  blocks: 400
  metrics: 3
  templates: 8
  rare_templates: 2
  anomaly_ratio: 0.05
  duration_range: [4, 8]
"""

STAGE_FILES = [
    "run.log",
    "synth/metrics.csv",
    "synth/logs.log",
    "synth/labels.csv",
    "parse/templates.jsonl",
    "parse/line_ids.csv",
    "preprocess/train/manifest.json",
    "preprocess/val/manifest.json",
    "preprocess/test/manifest.json",
    "train/checkpoint.npz",
    "train/loss_curve.csv",
    "detect/scores_val.csv",
    "detect/scores_test.csv",
    "detect/threshold.json",
    "detect/mask_rates.csv",
    "evaluate/report.json",
    "report/scores.csv",
    "report/frequency_mask.csv",
]

DATA_ARTIFACTS = [
    "synth/metrics.csv",
    "synth/logs.log",
    "synth/labels.csv",
    "parse/templates.jsonl",
    "parse/line_ids.csv",
    "preprocess/train/metrics.csv",
    "preprocess/train/occurrence.jsonl",
    "preprocess/test/metrics.csv",
    "preprocess/val/metrics.csv",
    "train/loss_curve.csv",
    "detect/scores_val.csv",
    "detect/scores_test.csv",
    "detect/threshold.json",
    "detect/mask_rates.csv",
    "evaluate/report.json",
    "report/scores.csv",
    "report/frequency_mask.csv",
]


@pytest.fixture
def config_path(tmp_path: Path) -> Path:
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY_CONFIG)
    return path


def test_run_all(tmp_path: Path, config_path: Path):
    out = tmp_path / "run"
    assert cli.main(["run-all", "-c", str(config_path), "-o", str(out), "-v"]) == 0
    for name in STAGE_FILES:
        assert (out / name).is_file(), name

    report = json.loads((out / "evaluate" / "report.json").read_text())
    assert set(report) >= {"config_hash", "model", "baseline", "windows", "score_ratio"}
    assert 0.0 <= report["model"]["f1"] <= 1.0
    assert report["windows"] == 80 - 8 + 1

    scores = ScoreTable.from_csv(out / "detect" / "scores_test.csv")
    assert scores["start_block"].iloc[0] == 280
    assert scores.is_labeled

    curve = pd.read_csv(out / "train" / "loss_curve.csv")
    assert len(curve) == 2
    assert (curve["config_hash"] == report["config_hash"]).all()

    for stage in ("parse", "preprocess", "train", "detect", "evaluate", "report"):
        manifest = json.loads((out / stage / "manifest.json").read_text())
        assert manifest["stage"] == stage
        assert manifest["config_hash"] == report["config_hash"]
        assert "numpy" in manifest["versions"]


def test_run_all_is_reproducible(tmp_path: Path, config_path: Path):
    out = tmp_path / "run"
    assert cli.main(["run-all", "-c", str(config_path), "-o", str(out)]) == 0
    first = {
        name: (out / name).read_bytes()
        for name in ("detect/scores_test.csv", "evaluate/report.json", "train/loss_curve.csv")
    }

    # existing outputs are protected
    assert cli.main(["run-all", "-c", str(config_path), "-o", str(out)]) == 1
    assert cli.main(["run-all", "-c", str(config_path), "-o", str(out), "--overwrite"]) == 0
    for name, data in first.items():
        assert (out / name).read_bytes() == data, name


def test_stage_by_stage(tmp_path: Path, config_path: Path):
    out = tmp_path / "run"
    common = ["-c", str(config_path), "-o", str(out)]
    for command in ("synth", "parse-logs", "preprocess", "train", "detect", "evaluate", "report"):
        assert cli.main([command] + common) == 0, command
    assert (out / "report" / "scores.csv").is_file()

    # the stages one by one produce exactly what run-all does, in any directory
    together = tmp_path / "together"
    assert cli.main(["run-all", "-c", str(config_path), "-o", str(together)]) == 0
    for name in DATA_ARTIFACTS:
        assert (out / name).read_bytes() == (together / name).read_bytes(), name

    # resuming a finished checkpoint replaces the stage outputs without training further
    assert cli.main(["train", "--resume"] + common) == 0
    curve = pd.read_csv(out / "train" / "loss_curve.csv")
    assert len(curve) == 2


def _tiny_inputs(tmp_path: Path) -> RunConfig:
    t0 = 1704067200  # 2024-01-01T00:00:00Z
    metrics = tmp_path / "metrics.csv"
    metrics.write_text(
        "timestamp,cpu\n" + "".join(f"{t0 + 10 * ii},{1.0 + ii % 3}\n" for ii in range(10))
    )
    logs = tmp_path / "app.log"
    logs.write_text(
        "2024-01-01T00:00:05 worker 7 started\n"
        "2024-01-01T00:00:15 worker 8 started\n"
        "2024-01-01T00:10:00 worker 9 started\n"
    )
    return RunConfig(
        output_dir=str(tmp_path / "run"),
        ingest=IngestConfig(metrics_path=str(metrics), logs_path=str(logs)),
    )


def test_out_of_range_log_lines(tmp_path: Path, caplog: pytest.LogCaptureFixture):
    config = _tiny_inputs(tmp_path)
    parsed = pipeline.run_parse(config)
    assert (parsed["lines"], parsed["out_of_range_lines"], parsed["blocks"]) == (3, 1, 10)

    with caplog.at_level(logging.WARNING):
        manifest = pipeline.run_preprocess(config)
    assert (manifest["log_lines"], manifest["dropped_lines"]) == (2, 1)
    assert "Dropped 1 of 3" in caplog.text

    train = pipeline.load_split(config, "train")
    assert train.log_occurrence.sum() == 2
    assert train.log_occurrence[:2].sum() == 2


def test_overwrite_writes_fresh_manifest(tmp_path: Path):
    config = _tiny_inputs(tmp_path)
    pipeline.run_parse(config)
    path = Path(config.output_dir) / "parse" / "manifest.json"
    manifest = json.loads(path.read_text())
    manifest["stale_count"] = 99
    path.write_text(json.dumps(manifest))

    with pytest.raises(OutputExistsError):
        pipeline.run_parse(config)
    again = pipeline.run_parse(config, overwrite=True)
    assert "stale_count" not in again
    assert "stale_count" not in json.loads(path.read_text())
    assert again["lines"] == 3


def test_unlabeled_inputs(tmp_path: Path, config_path: Path):
    synth = tmp_path / "data"
    assert cli.main(["synth", "-c", str(config_path), "-o", str(synth)]) == 0

    out = tmp_path / "run"
    argv = [
        "run-all",
        "-c",
        str(config_path),
        "-o",
        str(out),
        "--metrics",
        str(synth / "synth" / "metrics.csv"),
        "--logs",
        str(synth / "synth" / "logs.log"),
    ]
    # detection works without labels; evaluation needs them
    assert cli.main(argv) == 3
    assert not (out / "synth").exists()
    threshold = json.loads((out / "detect" / "threshold.json").read_text())
    assert threshold["policy"] == "percentile:99"
    scores = ScoreTable.from_csv(out / "detect" / "scores_test.csv")
    assert (scores.labels == -1).all()


def test_missing_inputs(tmp_path: Path):
    argv = ["parse-logs", "-o", str(tmp_path / "run")]
    missing = tmp_path / "missing.csv"
    assert cli.main(argv + ["--metrics", str(missing), "--logs", str(missing)]) == 3


def test_config_errors(tmp_path: Path):
    assert cli.main(["train", "-c", str(tmp_path / "nope.yaml")]) == 2
    assert cli.main(["train", "--profile", "nope"]) == 2

    bad = tmp_path / "bad.yaml"
    bad.write_text("model:\n  kernel_size: 4\n")
    assert cli.main(["train", "-c", str(bad)]) == 2


def test_evaluate_rates(capsys: pytest.CaptureFixture):
    assert cli.main(["evaluate", "--precision", "0.904", "--recall", "0.965"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["f1"] == pytest.approx(0.934, abs=5e-4)

    assert cli.main(["evaluate", "--precision", "1.5", "--recall", "0.5"]) == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["evaluate", "--precision", "0.9"])
    assert exc.value.code == 1


@pytest.mark.parametrize("argv", [[], ["bogus"], ["train", "--unknown"]])
def test_usage_errors(argv):
    with pytest.raises(SystemExit) as exc:
        cli.main(argv)
    assert exc.value.code == 1


@pytest.mark.slow
def test_benchmark_acceptance(tmp_path: Path):
    out = tmp_path / "bench"
    assert cli.main(["run-all", "--profile", "benchmark", "-o", str(out)]) == 0
    report = json.loads((out / "evaluate" / "report.json").read_text())
    assert report["model"]["f1"] >= 0.80
    assert report["model"]["f1"] >= report["baseline"]["f1"] + 0.10
    assert report["score_ratio"] > 1.0


@pytest.mark.slow
def test_frequency_focus_ablation(tmp_path: Path):
    wins = 0
    for seed in range(3):
        results = {}
        for use_fff in (True, False):
            config = load_profile("benchmark")
            config.train.seed = seed
            config.model.use_fff = use_fff
            config.output_dir = str(tmp_path / f"seed{seed}-{use_fff}")
            pipeline.run_all(config)
            results[use_fff] = json.loads(
                (Path(config.output_dir) / "evaluate" / "report.json").read_text()
            )
        on, off = results[True], results[False]
        if on["score_ratio"] > off["score_ratio"] and on["model"]["f1"] >= off["model"]["f1"]:
            wins += 1
    assert wins >= 2


if __name__ == "__main__":
    pytest.main([__file__])
