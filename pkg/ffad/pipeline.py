"""
Pipeline stages shared by the CLI subcommands and `run-all`.

Every stage reads its inputs from the run's output directory (or the ingest paths in
the config), writes into its own subdirectory and finishes by writing a `manifest.json`
recording the stage, its inputs, the config hash, package versions and wall-clock time.
A stage refuses to replace existing outputs unless `overwrite=True`.
"""

import json
import logging
import platform
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from ffad.config import ModelConfig, RunConfig
from ffad.detect import (
    EvalReport,
    ZScoreBaseline,
    evaluate,
    score_windows,
    select_threshold,
)
from ffad.errors import DataError, OutputExistsError
from ffad.ingest import (
    TimeBlockIndex,
    bucket,
    aggregate_metrics,
    read_labels,
    read_logs,
    read_metrics,
)
from ffad.series import (
    SPLITS,
    MultiModalSeries,
    WindowBatch,
    build_log_occurrence,
    fit_norm,
    make_windows,
    split_bounds,
    stack_windows,
)
from ffad.synth import generate
from ffad.table import ScoreTable
from ffad.templates import TemplateTable, parse_corpus
from ffad.train import Checkpoint, fit

logger = logging.getLogger(__name__)

STAGES = ("synth", "parse", "preprocess", "train", "detect", "evaluate", "report")


@dataclass
class RunLayout:
    """
    File locations inside a run's output directory.
    """

    root: Path

    def stage(self, name: str) -> Path:
        return self.root / name

    @property
    def log_file(self) -> Path:
        return self.root / "run.log"

    @property
    def templates(self) -> Path:
        return self.stage("parse") / "templates.jsonl"

    @property
    def line_ids(self) -> Path:
        return self.stage("parse") / "line_ids.csv"

    def split(self, name: str) -> Path:
        return self.stage("preprocess") / name

    @property
    def checkpoint(self) -> Path:
        return self.stage("train") / "checkpoint.npz"

    @property
    def loss_curve(self) -> Path:
        return self.stage("train") / "loss_curve.csv"

    def scores(self, split: str) -> Path:
        return self.stage("detect") / f"scores_{split}.csv"

    @property
    def threshold(self) -> Path:
        return self.stage("detect") / "threshold.json"

    @property
    def mask_rates(self) -> Path:
        return self.stage("detect") / "mask_rates.csv"

    @property
    def report(self) -> Path:
        return self.stage("evaluate") / "report.json"


def versions() -> Dict[str, str]:
    from ffad import __version__

    return {
        "ffad": __version__,
        "numpy": np.__version__,
        "pandas": pd.__version__,
        "python": platform.python_version(),
    }


def _describe(path: Path) -> Dict[str, Any]:
    return {"path": str(path), "bytes": path.stat().st_size if path.is_file() else None}


@dataclass
class StageRun:
    """
    Bookkeeping for one stage execution.
    """

    name: str
    out_dir: Path
    config_hash: str
    inputs: List[Path] = field(default_factory=list)
    _tic: float = field(default_factory=time.monotonic)

    @classmethod
    def start(
        cls, name: str, config: RunConfig, overwrite: bool = False
    ) -> "StageRun":
        out_dir = RunLayout(Path(config.output_dir)).stage(name)
        manifest = out_dir / "manifest.json"
        if manifest.exists():
            if not overwrite:
                raise OutputExistsError(
                    f"Stage {name!r} outputs already exist in {out_dir}; pass overwrite "
                    "(--overwrite) to replace them"
                )
            # keys of a previous run must not leak into the new manifest
            manifest.unlink()
        out_dir.mkdir(parents=True, exist_ok=True)
        logger.info("Stage %s -> %s", name, out_dir)
        return cls(name=name, out_dir=out_dir, config_hash=config.config_hash())

    def finish(self, **extra) -> Dict[str, Any]:
        """
        Write the stage manifest, merging into a data manifest the stage itself wrote.
        """
        path = self.out_dir / "manifest.json"
        manifest: Dict[str, Any] = {}
        if path.exists():
            with path.open() as f:
                manifest = json.load(f)
        seconds = time.monotonic() - self._tic
        manifest.update(extra)
        manifest.update(
            {
                "stage": self.name,
                "config_hash": self.config_hash,
                "inputs": [_describe(p) for p in self.inputs],
                "versions": versions(),
                "seconds": round(seconds, 3),
            }
        )
        with path.open("w") as f:
            json.dump(manifest, f, indent=2, default=str)
        logger.info("Stage %s finished in %.1fs", self.name, seconds)
        return manifest


def _json(path: Path, payload: Dict[str, Any]):
    with path.open("w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def resolve_inputs(config: RunConfig) -> Tuple[Path, Path, Optional[Path]]:
    """
    Metrics, logs and labels paths from the ingest section, defaulting to the synth
    stage outputs of this run.
    """
    synth = RunLayout(Path(config.output_dir)).stage("synth")
    ingest = config.ingest
    metrics = Path(ingest.metrics_path) if ingest.metrics_path else synth / "metrics.csv"
    logs = Path(ingest.logs_path) if ingest.logs_path else synth / "logs.log"
    if ingest.labels_path:
        labels: Optional[Path] = Path(ingest.labels_path)
    elif not ingest.metrics_path and (synth / "labels.csv").exists():
        labels = synth / "labels.csv"
    else:
        labels = None
    return metrics, logs, labels


def block_index(config: RunConfig, timestamps: List[int]) -> TimeBlockIndex:
    ingest = config.ingest
    index = TimeBlockIndex.covering(timestamps, ingest.dt, ingest.t0)
    if ingest.blocks is not None:
        index = TimeBlockIndex(t0=index.t0, dt=ingest.dt, count=ingest.blocks)
    if index.count == 0:
        raise DataError("Metrics cover no time blocks")
    return index


def _metric_samples(config: RunConfig, path: Path):
    result = read_metrics(path, config.ingest.metric_names)
    return result, block_index(config, [s.timestamp for s in result.items])


def run_synth(config: RunConfig, overwrite: bool = False) -> Dict[str, Any]:
    stage = StageRun.start("synth", config, overwrite)
    result = generate(config.synth, stage.out_dir, config_hash=stage.config_hash)
    return stage.finish(
        outputs=[str(result.metrics_path), str(result.logs_path), str(result.labels_path)]
    )


def run_parse(config: RunConfig, overwrite: bool = False) -> Dict[str, Any]:
    """
    Mine templates on the training block range and assign every line an id; lines
    matching no frozen template get the unknown id `n'`.
    """
    stage = StageRun.start("parse", config, overwrite)
    metrics_path, logs_path, _ = resolve_inputs(config)
    stage.inputs = [metrics_path, logs_path]
    layout = RunLayout(Path(config.output_dir))

    samples, index = _metric_samples(config, metrics_path)
    logs = read_logs(logs_path, config.ingest.timestamp_format)
    lines = logs.items
    blocks = index.block_of(np.array([line.timestamp for line in lines], dtype=np.int64))
    train_end = split_bounds(index.count, config.split)["train"][1]
    in_train = (blocks >= 0) & (blocks < train_end)

    train_lines = [line for line, ok in zip(lines, in_train) if ok]
    table, train_ids = parse_corpus(train_lines, config.parse_tree)
    ids = np.full(len(lines), table.unknown_id, dtype=np.int64)
    ids[in_train] = train_ids
    rest = [line for line, ok in zip(lines, in_train) if not ok]
    ids[~in_train] = table.assign(rest)

    table.to_jsonl(layout.templates)
    pd.DataFrame(
        {
            "line": np.arange(len(lines)),
            "timestamp": [line.timestamp for line in lines],
            "block": blocks,
            "template_id": ids,
            "config_hash": stage.config_hash,
        }
    ).to_csv(layout.line_ids, index=False)

    unknown = int((ids == table.unknown_id).sum())
    return stage.finish(
        templates=len(table),
        unknown_id=table.unknown_id,
        lines=len(lines),
        training_lines=len(train_lines),
        unknown_lines=unknown,
        skipped_lines=logs.skipped,
        out_of_range_lines=int((~index.contains(blocks)).sum()),
        metric_gaps=samples.gaps,
        blocks=index.count,
    )


def run_preprocess(config: RunConfig, overwrite: bool = False) -> Dict[str, Any]:
    """
    Align metrics and log occurrences into blocks, fit normalization on the training
    split and save the three chronological splits.
    """
    stage = StageRun.start("preprocess", config, overwrite)
    layout = RunLayout(Path(config.output_dir))
    metrics_path, _, labels_path = resolve_inputs(config)
    stage.inputs = [metrics_path, layout.templates, layout.line_ids]
    if labels_path is not None:
        stage.inputs.append(labels_path)

    samples, index = _metric_samples(config, metrics_path)
    names = config.ingest.metric_names or _metric_names(metrics_path)
    metrics = aggregate_metrics(samples.items, index, len(names))

    table = TemplateTable.from_jsonl(layout.templates, config.parse_tree)
    if not layout.line_ids.is_file():
        raise FileNotFoundError(f"Template id stream {layout.line_ids} does not exist")
    line_ids = pd.read_csv(layout.line_ids)
    rows = bucket(
        zip(line_ids["timestamp"].tolist(), line_ids["template_id"].tolist()),
        index,
        key=lambda row: row[0],
    )
    ids_by_block = {block: [tid for _, tid in group] for block, group in rows.items.items()}
    occurrence = build_log_occurrence(ids_by_block, len(table) + 1, index.count)

    labels = read_labels(labels_path, index.count) if labels_path is not None else None
    series = MultiModalSeries(
        metrics=metrics,
        log_occurrence=occurrence,
        index=index,
        labels=labels,
        metric_names=list(names),
    )
    bounds = split_bounds(index.count, config.split)
    train_lo, train_hi = bounds["train"]
    stats = fit_norm(series.metrics[train_lo:train_hi])
    normalized = series.normalized(stats)
    for name, (lo, hi) in bounds.items():
        normalized.slice(lo, hi).save(
            layout.split(name),
            extra={"split": name, "config_hash": stage.config_hash, "templates": len(table)},
        )

    return stage.finish(
        blocks=index.count,
        metrics=len(names),
        templates=len(table),
        log_columns=len(table) + 1,
        splits={name: list(b) for name, b in bounds.items()},
        anomalous_blocks=None if labels is None else int(labels.sum()),
        log_lines=rows.kept,
        dropped_lines=rows.dropped,
    )


def _metric_names(path: Path) -> List[str]:
    return list(pd.read_csv(path, nrows=0).columns[1:])


def load_split(config: RunConfig, name: str) -> MultiModalSeries:
    series, _ = MultiModalSeries.load(RunLayout(Path(config.output_dir)).split(name))
    return series


def split_windows(config: RunConfig, name: str) -> WindowBatch:
    """
    Windows of one split, restricted to the configured modalities. A split shorter
    than the window yields an empty batch.
    """
    series = load_split(config, name)
    modalities = config.model.modalities
    if len(series) < config.window.w:
        logger.warning(
            "Split %s has %d blocks, fewer than w=%d; it yields no windows",
            name,
            len(series),
            config.window.w,
        )
        n = series.n_metrics if modalities != "logs" else 0
        nl = series.n_logs if modalities != "metrics" else 0
        w = config.window.w
        return WindowBatch(
            metrics=np.zeros((0, w, n)),
            logs=np.zeros((0, w, nl)),
            labels=np.zeros(0, dtype=np.int8),
            starts=np.zeros(0, dtype=np.int64),
        )
    return stack_windows(make_windows(series, config.window), modalities)


def model_config_for(config: RunConfig, batch: WindowBatch) -> ModelConfig:
    return replace(
        config.model,
        window=config.window.w,
        metric_channels=batch.metrics.shape[-1],
        log_channels=batch.logs.shape[-1],
    )


def run_train(
    config: RunConfig, overwrite: bool = False, resume: bool = False
) -> Dict[str, Any]:
    layout = RunLayout(Path(config.output_dir))
    previous = None
    if resume and layout.checkpoint.is_file():
        previous = Checkpoint.load(layout.checkpoint)
        if previous.config_hash != config.config_hash():
            logger.warning("Resuming from a checkpoint written under a different config")
        overwrite = True
    stage = StageRun.start("train", config, overwrite)
    stage.inputs = [layout.split(name) / "manifest.json" for name in ("train", "val")]

    train = split_windows(config, "train")
    val = split_windows(config, "val")
    model_config = model_config_for(config, train)
    logger.info(
        "Training on %d windows (validation %d), N=%d nodes",
        len(train),
        len(val),
        model_config.nodes,
    )
    ckpt = fit(
        train,
        val,
        model_config,
        config.train,
        resume=previous,
        config_hash=stage.config_hash,
    )
    ckpt.save(layout.checkpoint)
    ckpt.loss_curve().assign(config_hash=stage.config_hash).to_csv(
        layout.loss_curve, index=False, float_format="%.17g"
    )
    return stage.finish(
        epochs=ckpt.epoch,
        best_epoch=ckpt.best_epoch,
        best_loss=ckpt.best_loss,
        parameters=ckpt.params.count(),
        early_stopped=ckpt.finished,
        checksum=ckpt.params.checksum(),
    )


def run_detect(config: RunConfig, overwrite: bool = False) -> Dict[str, Any]:
    """
    Score validation and test windows, fit the threshold on validation and flag test
    windows.
    """
    stage = StageRun.start("detect", config, overwrite)
    layout = RunLayout(Path(config.output_dir))
    stage.inputs = [layout.checkpoint]
    ckpt = Checkpoint.load(layout.checkpoint)

    tables, rates = {}, {}
    for split in ("val", "test"):
        batch = split_windows(config, split)
        tables[split], rates[split] = score_windows(
            batch, ckpt.params, ckpt.model_config, config.detect.chunk
        )

    val = tables["val"]
    if len(val) == 0:
        raise DataError("Validation split has no windows to fit a threshold on")
    # unlabeled windows carry label -1 everywhere, which best-f1 treats as single-class
    threshold, applied = select_threshold(
        val.scores,
        val.labels,
        config.detect.threshold_policy,
        config.detect.fallback_percentile,
    )

    for split, table in tables.items():
        table.with_predictions(threshold).to_csv_file(layout.scores(split), stage.config_hash)
    _json(
        layout.threshold,
        {"threshold": threshold, "policy": applied, "config_hash": stage.config_hash},
    )
    pd.DataFrame(
        {
            "component": np.arange(ckpt.model_config.nodes),
            "val_rate": rates["val"],
            "test_rate": rates["test"],
            "config_hash": stage.config_hash,
        }
    ).to_csv(layout.mask_rates, index=False, float_format="%.17g")

    return stage.finish(
        threshold=threshold,
        policy=applied,
        windows={split: len(t) for split, t in tables.items()},
    )


def evaluate_rates(precision: float, recall: float) -> EvalReport:
    """
    F1 for a published precision/recall pair.
    """
    return EvalReport.from_rates(precision, recall)


def run_evaluate(config: RunConfig, overwrite: bool = False) -> Dict[str, Any]:
    stage = StageRun.start("evaluate", config, overwrite)
    layout = RunLayout(Path(config.output_dir))
    stage.inputs = [layout.scores("test"), layout.threshold]

    test = ScoreTable.from_csv(layout.scores("test"))
    if not test.is_labeled:
        raise DataError("Test windows carry no labels; nothing to evaluate")
    with layout.threshold.open() as f:
        chosen = json.load(f)
    report = evaluate(test.predictions, test.labels, chosen["threshold"], chosen["policy"])

    baseline = ZScoreBaseline.fit(split_windows(config, "val"))
    baseline_report = None
    if baseline is not None:
        baseline_report = baseline.evaluate(split_windows(config, "test")).to_dict()
        baseline_report["channel"] = baseline.channel

    payload = {
        "config_hash": stage.config_hash,
        "model": report.to_dict(),
        "baseline": baseline_report,
        "windows": len(test),
        "anomalous_windows": int((test.labels == 1).sum()),
        "score_ratio": _finite_or_none(test.score_ratio),
    }
    _json(layout.report, payload)
    logger.info(
        "Test precision %.4f recall %.4f F1 %.4f",
        report.precision,
        report.recall,
        report.f1,
    )
    return stage.finish(
        f1=report.f1,
        baseline_f1=None if baseline_report is None else baseline_report["f1"],
    )


def _finite_or_none(value: float) -> Optional[float]:
    return float(value) if np.isfinite(value) else None


def run_report(config: RunConfig, overwrite: bool = False) -> Dict[str, Any]:
    """
    Export per-window scores of both scored splits and per-frequency mask firing rates
    for external plotting.
    """
    stage = StageRun.start("report", config, overwrite)
    layout = RunLayout(Path(config.output_dir))
    stage.inputs = [layout.scores("val"), layout.scores("test"), layout.mask_rates]

    frames = []
    for split in ("val", "test"):
        table = ScoreTable.from_csv(layout.scores(split))
        frames.append(pd.DataFrame(table).assign(split=split))
    scores = pd.concat(frames, ignore_index=True)
    scores.assign(config_hash=stage.config_hash).to_csv(
        stage.out_dir / "scores.csv", index=False, float_format="%.17g"
    )

    if not layout.mask_rates.is_file():
        raise FileNotFoundError(f"Mask rates {layout.mask_rates} do not exist")
    rates = pd.read_csv(layout.mask_rates, float_precision="round_trip")
    rates.assign(config_hash=stage.config_hash).to_csv(
        stage.out_dir / "frequency_mask.csv", index=False, float_format="%.17g"
    )

    summary = scores.groupby("split")["masked_fraction"].mean().to_dict()
    return stage.finish(
        windows=len(scores), mean_masked_fraction={k: float(v) for k, v in summary.items()}
    )


def run_all(config: RunConfig, overwrite: bool = False) -> Dict[str, Any]:
    """
    Every stage in order. The synth stage runs only when no metrics file is configured.
    """
    manifests = {}
    if not config.ingest.metrics_path:
        manifests["synth"] = run_synth(config, overwrite)
    manifests["parse"] = run_parse(config, overwrite)
    manifests["preprocess"] = run_preprocess(config, overwrite)
    manifests["train"] = run_train(config, overwrite)
    manifests["detect"] = run_detect(config, overwrite)
    manifests["evaluate"] = run_evaluate(config, overwrite)
    manifests["report"] = run_report(config, overwrite)
    return manifests


__all__ = [
    "SPLITS",
    "STAGES",
    "RunLayout",
    "StageRun",
    "evaluate_rates",
    "run_all",
    "run_detect",
    "run_evaluate",
    "run_parse",
    "run_preprocess",
    "run_report",
    "run_synth",
    "run_train",
]
