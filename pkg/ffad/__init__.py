r"""
ffad is a multi-modal anomaly detector for web-service telemetry. It fuses log-template
occurrences and metrics from a sliding window into one fully-connected graph, processes
the graph in the frequency domain with learnable Fourier graph operators, and flags
windows whose reconstruction error is unusually high.

The package covers the whole offline workflow: ingestion of metric CSVs and plain-text
logs, log template mining, time-block alignment and normalization, training with a small
reverse-mode autodiff core built on NumPy, threshold selection and evaluation, and a
labeled synthetic telemetry generator for benchmarking.

## Installation

From a source checkout, ffad can be installed with

```sh
pip install .
```

## Quickstart

Every stage is available from the `ffad` command line tool. To generate the shipped
synthetic benchmark and run the full pipeline on it, run

```sh
ffad run-all --profile benchmark -o runs/bench -v
```

Stage outputs land in subdirectories of the output directory (`synth/`, `parse/`,
`preprocess/`, `train/`, `detect/`, `evaluate/`, `report/`), each with a `manifest.json`
recording its inputs, config hash and package versions. To run on your own telemetry,
point the ingest section of a YAML config (or the `--metrics`, `--logs` and `--labels`
flags) at your files

```sh
ffad run-all -c my_config.yaml --metrics metrics.csv --logs service.log -o runs/mine
```

Stages can also be run one by one

```sh
ffad parse-logs -c my_config.yaml
ffad preprocess -c my_config.yaml
ffad train -c my_config.yaml
ffad detect -c my_config.yaml
ffad evaluate -c my_config.yaml
ffad report -c my_config.yaml
```

See `ffad --help` for more information.

From Python, the same stages are exposed in `ffad.pipeline`

```python
from ffad.config import load_profile
from ffad.pipeline import run_all

config = load_profile("benchmark")
config.output_dir = "runs/bench"
manifests = run_all(config)
print(manifests["evaluate"]["f1"])
```

## Configuration

Configuration files are YAML mappings mirroring `ffad.config.RunConfig`. Unknown keys are
rejected, and every field documents its default in `ffad.config`.

```yaml
output_dir: runs/example
window:
  w: 50
model:
  embed_dim: 32
  layers: 3
  percentile: 95
train:
  lr: 0.0005
  max_epochs: 50
  seed: 0
detect:
  threshold_policy: best-f1
```
"""

try:
    from ._version import __version__, __version_tuple__  # noqa
except ImportError:
    __version__ = "0.1.0"
    __version_tuple__ = (0, 1, 0)
