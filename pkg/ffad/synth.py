"""
Synthetic labeled telemetry with injected faults.

Metrics follow `level + amplitude * sin(2 pi t / period + phase) + AR(1)` per channel.
Each log template occurs in a block with a fixed probability and emits one or more
lines whose wildcard slots are filled with random numeric parameters, so mining the
generated logs recovers the template pool. The last `rare_templates` templates of the
pool are only emitted by faults.

Fault kinds:

- `metric_spike`: large, jittered positive deviations on the affected metrics.
- `metric_level_shift`: a constant offset on the affected metrics.
- `template_burst`: affected templates occur in every block with extra lines.
- `rare_template`: a rare template occurs in every block of the fault.
- `correlated_lagged`: a rare-template burst over `[start, start + duration)` and a metric
  level shift over `[start + lag, start + lag + duration)`; labels cover both intervals.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
import pandas as pd

from ffad.config import FaultSpec, MetricBaseline, SynthConfig
from ffad.ingest.labels import write_labels
from ffad.templates import WILDCARD

logger = logging.getLogger(__name__)

LOG_TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M:%S"

_SUBSYSTEMS = [
    "scheduler", "cache", "gateway", "auth", "storage", "queue", "indexer", "billing",
    "router", "worker", "session", "replica", "proxy", "mailer", "search", "ledger",
]
_EVENTS = [
    "request", "flush", "retry", "timeout", "commit", "evict", "sync", "connect",
    "refresh", "rebalance", "reject", "restore", "compact", "drain", "probe", "expire",
]
_WORDS = [
    "completed", "in", "for", "on", "after", "bytes", "ms", "shard", "node", "slot",
    "from", "peer", "status", "took", "items", "pending", "with", "code", "host", "lease",
]


@dataclass
class PoolTemplate:
    id: int
    tokens: List[str]
    probability: float
    rare: bool

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass
class SynthResult:
    metrics_path: Path
    logs_path: Path
    labels_path: Path
    manifest_path: Path
    labels: np.ndarray
    faults: List[FaultSpec]
    templates: List[PoolTemplate]
    occurrence: np.ndarray
    """T x pool-size matrix of emitted template occurrences."""
    lines: int = 0
    metric_names: List[str] = field(default_factory=list)

    @property
    def anomaly_ratio(self) -> float:
        return float(self.labels.mean()) if len(self.labels) else 0.0


def build_template_pool(config: SynthConfig, rng: np.random.Generator) -> List[PoolTemplate]:
    """
    Template pool with a distinct `(first, second)` token pair per template.
    """
    if config.templates > len(_SUBSYSTEMS) * len(_EVENTS):
        raise ValueError(f"At most {len(_SUBSYSTEMS) * len(_EVENTS)} templates supported")

    if config.template_probs:
        probs = np.asarray(config.template_probs, dtype=np.float64)
    else:
        probs = rng.uniform(0.05, 0.6, config.templates)
    first_rare = config.templates - config.rare_templates

    pool = []
    for tid in range(config.templates):
        head = [_SUBSYSTEMS[tid % len(_SUBSYSTEMS)], _EVENTS[tid // len(_SUBSYSTEMS)]]
        tail = list(rng.choice(_WORDS, size=int(rng.integers(1, 4)), replace=False))
        slots = int(rng.integers(1, 3))
        for _ in range(slots):
            tail.insert(int(rng.integers(0, len(tail) + 1)), WILDCARD)
        rare = tid >= first_rare
        pool.append(
            PoolTemplate(
                id=tid,
                tokens=head + tail,
                probability=0.0 if rare else float(probs[tid]),
                rare=rare,
            )
        )
    return pool


def _render(template: PoolTemplate, rng: np.random.Generator) -> str:
    out = []
    for token in template.tokens:
        if token != WILDCARD:
            out.append(token)
            continue
        kind = int(rng.integers(0, 4))
        if kind == 0:
            out.append(str(int(rng.integers(0, 100_000))))
        elif kind == 1:
            out.append(f"{rng.uniform(0, 1000):.2f}")
        elif kind == 2:
            a, b, c = rng.integers(0, 256, 3)
            out.append(f"10.{a}.{b}.{c}")
        else:
            out.append(f"0x{int(rng.integers(0, 2**32)):08x}")
    return " ".join(out)


def metric_profile(config: SynthConfig, rng: np.random.Generator) -> List[MetricBaseline]:
    if config.metric_profile:
        return list(config.metric_profile)
    return [
        MetricBaseline(
            level=float(rng.uniform(-5, 5)),
            amplitude=float(rng.uniform(0.5, 2.0)),
            period=int(rng.choice([60, 144, 360, 720])),
            ar_coef=float(rng.uniform(0.3, 0.8)),
            noise_std=float(rng.uniform(0.1, 0.3)),
        )
        for _ in range(config.metrics)
    ]


def noise_scale(baseline: MetricBaseline) -> float:
    """
    Stationary standard deviation of the AR(1) component.
    """
    scale = baseline.noise_std / np.sqrt(1.0 - baseline.ar_coef**2)
    return float(scale) if scale > 0 else 1.0


def baseline_metrics(
    profile: List[MetricBaseline], blocks: int, rng: np.random.Generator
) -> np.ndarray:
    t = np.arange(blocks)
    out = np.empty((blocks, len(profile)))
    for ch, base in enumerate(profile):
        phase = rng.uniform(0, 2 * np.pi)
        eps = rng.normal(0.0, base.noise_std, blocks)
        # Start the AR state from its stationary distribution.
        ar = np.empty(blocks)
        ar[0] = rng.normal(0.0, noise_scale(base) if base.noise_std > 0 else 0.0)
        for k in range(1, blocks):
            ar[k] = base.ar_coef * ar[k - 1] + eps[k]
        out[:, ch] = base.level + base.amplitude * np.sin(2 * np.pi * t / base.period + phase) + ar
    return out


def _default_channels(fault: FaultSpec, config: SynthConfig) -> FaultSpec:
    if fault.channels:
        return fault
    first_rare = config.templates - config.rare_templates
    if fault.kind in ("metric_spike", "metric_level_shift", "template_burst"):
        channels = [0]
    elif fault.kind == "rare_template":
        channels = [first_rare]
    else:
        channels = [first_rare, 0]
    return replace(fault, channels=channels)


def plan_faults(config: SynthConfig, rng: np.random.Generator) -> List[FaultSpec]:
    """
    Place faults until about `anomaly_ratio * T` blocks are covered.

    The series is cut into one stratum per fault and each fault lands at a random
    position inside its own stratum, so faults never overlap and every part of the
    series (and therefore every chronological split) receives some.
    """
    target = config.anomaly_ratio * config.blocks
    if target <= 0:
        return []
    lo, hi = config.duration_range
    mean_lag = float(np.mean(config.lag_choices)) if config.lag_choices else 0.0
    mean_span = (lo + hi) / 2 + mean_lag / len(config.fault_kinds)
    count = max(1, int(round(target / mean_span)))
    stratum = config.blocks // count

    first_rare = config.templates - config.rare_templates
    normal = np.arange(first_rare)
    faults = []
    for k in range(count):
        kind = config.fault_kinds[k % len(config.fault_kinds)]
        duration = int(rng.integers(lo, hi + 1))
        lag = int(rng.choice(config.lag_choices)) if kind == "correlated_lagged" else 0
        span = duration + lag
        if span + 2 > stratum:
            logger.warning("Fault %d (%s) doesn't fit its stratum of %d blocks", k, kind, stratum)
            continue
        start = k * stratum + 1 + int(rng.integers(0, stratum - span - 1))
        magnitude = float(rng.uniform(*config.magnitude_range))
        if kind in ("metric_spike", "metric_level_shift"):
            size = int(rng.integers(1, min(2, config.metrics) + 1))
            channels = sorted(rng.choice(config.metrics, size=size, replace=False).tolist())
        elif kind == "template_burst":
            channels = [int(rng.choice(normal))]
        elif kind == "rare_template":
            channels = [int(rng.integers(first_rare, config.templates))]
        else:
            channels = [
                int(rng.integers(first_rare, config.templates)),
                int(rng.integers(0, config.metrics)),
            ]
        faults.append(
            FaultSpec(
                kind=kind,
                start=start,
                duration=duration,
                magnitude=magnitude,
                channels=channels,
                lag=lag,
            )
        )
    logger.info("Planned %d faults", len(faults))
    return faults


def fault_intervals(fault: FaultSpec) -> List[Tuple[int, int]]:
    """
    Labeled `[start, end)` block intervals of a fault.
    """
    if fault.kind == "correlated_lagged":
        return [
            (fault.start, fault.start + fault.duration),
            (fault.start + fault.lag, fault.start + fault.lag + fault.duration),
        ]
    return [(fault.start, fault.start + fault.duration)]


def apply_faults(
    metrics: np.ndarray,
    occurrence: np.ndarray,
    extra_lines: np.ndarray,
    faults: List[FaultSpec],
    profile: List[MetricBaseline],
    rng: np.random.Generator,
    max_lines: int,
) -> np.ndarray:
    """
    Inject faults in place and return the 0/1 block labels.
    """
    labels = np.zeros(metrics.shape[0], dtype=np.int8)
    for fault in faults:
        for lo, hi in fault_intervals(fault):
            labels[lo:hi] = 1
        window = slice(fault.start, fault.start + fault.duration)
        if fault.kind in ("metric_spike", "metric_level_shift"):
            for ch in fault.channels:
                scale = fault.magnitude * noise_scale(profile[ch])
                if fault.kind == "metric_spike":
                    jitter = 1.0 + 0.5 * np.abs(rng.normal(size=fault.duration))
                    metrics[window, ch] += scale * jitter
                else:
                    metrics[window, ch] += scale
        elif fault.kind in ("template_burst", "rare_template"):
            for tid in fault.channels:
                occurrence[window, tid] = 1
                extra_lines[window, tid] += max_lines
        else:
            tid, metric = fault.channels[0], fault.channels[1:]
            occurrence[window, tid] = 1
            extra_lines[window, tid] += max_lines
            lagged = slice(fault.start + fault.lag, fault.start + fault.lag + fault.duration)
            for ch in metric:
                metrics[lagged, ch] += fault.magnitude * noise_scale(profile[ch])
    return labels


def _format_times(seconds: np.ndarray) -> List[str]:
    return pd.to_datetime(seconds, unit="s", utc=True).strftime(LOG_TIMESTAMP_FORMAT).tolist()


def generate(
    config: SynthConfig, out_dir: Union[str, Path], config_hash: str = ""
) -> SynthResult:
    """
    Generate `metrics.csv`, `logs.log`, `labels.csv` and `manifest.json` in `out_dir`.
    Output files are byte-identical for identical configurations.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)

    pool = build_template_pool(config, rng)
    profile = metric_profile(config, rng)
    metrics = baseline_metrics(profile, config.blocks, rng)

    probs = np.array([tpl.probability for tpl in pool])
    occurrence = (rng.random((config.blocks, len(pool))) < probs).astype(np.int8)
    extra_lines = np.zeros_like(occurrence, dtype=np.int64)

    faults = [_default_channels(f, config) for f in config.faults]
    faults += plan_faults(config, rng)
    for fault in faults:
        if fault.end > config.blocks:
            raise ValueError(f"Fault {fault.kind} at {fault.start} runs past T={config.blocks}")
    labels = apply_faults(
        metrics,
        occurrence,
        extra_lines,
        faults,
        profile,
        rng,
        config.max_lines_per_occurrence,
    )

    metric_names = [f"metric_{ii}" for ii in range(config.metrics)]
    frame = pd.DataFrame(metrics, columns=metric_names)
    frame.insert(0, "timestamp", config.t0 + np.arange(config.blocks) * config.dt)
    metrics_path = out_dir / "metrics.csv"
    frame.to_csv(metrics_path, index=False, float_format="%.6f")

    logs_path = out_dir / "logs.log"
    lines = 0
    with logs_path.open("w") as f:
        for block in range(config.blocks):
            present = np.flatnonzero(occurrence[block])
            if len(present) == 0:
                continue
            counts = rng.integers(1, config.max_lines_per_occurrence + 1, len(present))
            counts = counts + extra_lines[block, present]
            tids = np.repeat(present, counts)
            offsets = np.sort(rng.integers(0, config.dt, len(tids)))
            order = rng.permutation(len(tids))
            stamps = _format_times(config.t0 + block * config.dt + offsets)
            for stamp, tid in zip(stamps, tids[order]):
                f.write(f"{stamp} {_render(pool[tid], rng)}\n")
            lines += len(tids)

    labels_path = out_dir / "labels.csv"
    write_labels(labels, labels_path)

    result = SynthResult(
        metrics_path=metrics_path,
        logs_path=logs_path,
        labels_path=labels_path,
        manifest_path=out_dir / "manifest.json",
        labels=labels,
        faults=faults,
        templates=pool,
        occurrence=occurrence,
        lines=lines,
        metric_names=metric_names,
    )
    manifest: Dict = {
        "stage": "synth",
        "config_hash": config_hash,
        "seed": config.seed,
        "blocks": config.blocks,
        "dt": config.dt,
        "t0": config.t0,
        "metric_names": metric_names,
        "metric_profile": [p.to_dict() for p in profile],
        "templates": [
            {"id": t.id, "text": t.text, "probability": t.probability, "rare": t.rare}
            for t in pool
        ],
        "emitted_templates": int((occurrence.sum(axis=0) > 0).sum()),
        "faults": [f.to_dict() for f in faults],
        "anomalous_blocks": int(labels.sum()),
        "anomaly_ratio": result.anomaly_ratio,
        "log_lines": lines,
        "timestamp_format": LOG_TIMESTAMP_FORMAT,
    }
    with result.manifest_path.open("w") as f:
        json.dump(manifest, f, indent=2)
    logger.info(
        "Generated %d blocks, %d log lines, %d faults (anomaly ratio %.4f) in %s",
        config.blocks,
        lines,
        len(faults),
        result.anomaly_ratio,
        out_dir,
    )
    return result
