"""
Run configuration: one dataclass per pipeline stage, assembled into a `RunConfig` tree.

Every field is declared with `config_field`, which records a help string and optional
validation rules in the field metadata. Configuration files are YAML mappings whose keys
mirror the dataclass fields; unknown keys are rejected.
"""

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from importlib import resources
from pathlib import Path
from typing import (
    Any,
    Callable,
    Dict,
    List,
    Mapping,
    Optional,
    Sequence,
    Union,
    get_type_hints,
)

import yaml
from typing_extensions import Self, get_args, get_origin

from ffad.errors import ConfigError

FAULT_KINDS = (
    "metric_spike",
    "metric_level_shift",
    "template_burst",
    "rare_template",
    "correlated_lagged",
)

_PERCENTILE_POLICY = re.compile(r"^percentile:(\d+(?:\.\d+)?)$")


def config_field(
    default: Optional[Any] = None,
    *,
    help: str = "",
    choices: Optional[Sequence[Any]] = None,
    minimum: Optional[float] = None,
    maximum: Optional[float] = None,
    default_factory: Optional[Callable] = None,
):
    """
    Configuration dataclass field.
    """
    metadata = {
        "help": help,
        "choices": tuple(choices) if choices is not None else None,
        "minimum": minimum,
        "maximum": maximum,
    }
    if default_factory is not None:
        return field(default_factory=default_factory, metadata=metadata)
    return field(default=default, metadata=metadata)


@dataclass
class ConfigSection:
    """
    Base class for configuration sections. Provides dict conversion and field-level
    validation driven by `config_field` metadata.
    """

    def __post_init__(self):
        for fld in fields(self):
            value = getattr(self, fld.name)
            if value is None:
                continue
            choices = fld.metadata.get("choices")
            if choices and value not in choices:
                raise ConfigError(
                    f"{type(self).__name__}.{fld.name}={value!r} isn't one of {list(choices)}"
                )
            lo, hi = fld.metadata.get("minimum"), fld.metadata.get("maximum")
            if lo is not None and value < lo:
                raise ConfigError(
                    f"{type(self).__name__}.{fld.name}={value!r} is below minimum {lo}"
                )
            if hi is not None and value > hi:
                raise ConfigError(
                    f"{type(self).__name__}.{fld.name}={value!r} is above maximum {hi}"
                )
        self.validate()

    def validate(self):
        """
        Cross-field checks. Raise `ConfigError` on failure.
        """

    @classmethod
    def from_dict(cls, data: Optional[Mapping[str, Any]], path: str = "") -> Self:
        """
        Initialize from a (possibly nested) dict, rejecting unknown keys.
        """
        if data is None:
            data = {}
        if not isinstance(data, Mapping):
            raise ConfigError(f"{path or 'config'}: expected a mapping, got {data!r}")

        hints = get_type_hints(cls)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            keys = ", ".join(_join(path, k) for k in unknown)
            raise ConfigError(f"Unknown config key(s): {keys}")

        kwargs = {
            key: _coerce(hints[key], value, _join(path, key))
            for key, value in data.items()
        }
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"{path or 'config'}: {exc}") from exc

    def to_dict(self) -> Dict[str, Any]:
        """
        Convert to a plain nested dict that round-trips through `from_dict`.
        """
        return asdict(self)


def _join(path: str, key: Union[str, int]) -> str:
    return f"{path}.{key}" if path else str(key)


def _coerce(alias: Any, value: Any, key: str) -> Any:
    """
    Coerce a parsed YAML value to the annotated field type.
    """
    origin = get_origin(alias)
    if origin is Union:
        if value is None:
            return None
        args = [a for a in get_args(alias) if a is not type(None)]
        return _coerce(args[0], value, key)

    if origin in (list, List):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        (item,) = get_args(alias)
        return [_coerce(item, v, f"{key}[{ii}]") for ii, v in enumerate(value)]

    if isinstance(alias, type) and is_dataclass(alias):
        if isinstance(value, alias):
            return value
        return alias.from_dict(value, key)

    if alias is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if alias is int:
        if isinstance(value, bool):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        if isinstance(value, int):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if alias is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    if alias is str:
        if isinstance(value, str):
            return value
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


@dataclass
class IngestConfig(ConfigSection):
    metrics_path: Optional[str] = config_field(
        help="Metrics CSV; first column `timestamp`, one column per metric."
    )
    logs_path: Optional[str] = config_field(
        help="Plain-text log file, one message per line with a timestamp prefix."
    )
    labels_path: Optional[str] = config_field(
        help="Optional labels CSV with columns `block,label`."
    )
    metric_names: Optional[List[str]] = config_field(
        help="Expected metric columns in order. Defaults to the CSV header."
    )
    timestamp_format: str = config_field(
        "%Y-%m-%dT%H:%M:%S", help="strftime pattern of the log line timestamp prefix."
    )
    dt: int = config_field(10, help="Time block length in seconds.", minimum=1)
    t0: Optional[int] = config_field(
        help="Series start time (UTC seconds). Defaults to the first metric timestamp."
    )
    blocks: Optional[int] = config_field(
        help="Total number of time blocks T. Defaults to cover the metric file.",
        minimum=0,
    )


@dataclass
class MaskRule(ConfigSection):
    name: str = config_field("", help="Rule label.")
    pattern: str = config_field("", help="Regular expression matched against a token.")
    replacement: str = config_field("<*>", help="Wildcard token.")

    def validate(self):
        try:
            re.compile(self.pattern)
        except re.error as exc:
            raise ConfigError(f"Mask rule {self.name!r}: bad pattern: {exc}") from exc


def default_mask_rules() -> List[MaskRule]:
    return [
        MaskRule(
            name="uuid",
            pattern=r"[0-9a-fA-F]{8}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-"
            r"[0-9a-fA-F]{12}",
        ),
        MaskRule(name="ipv4", pattern=r"\d{1,3}(?:\.\d{1,3}){3}(?::\d+)?"),
        MaskRule(name="hex", pattern=r"0[xX][0-9a-fA-F]+"),
        MaskRule(name="number", pattern=r"[-+]?\d+(?:\.\d+)?"),
        MaskRule(name="numeric", pattern=r".*\d.*"),
    ]


@dataclass
class ParseTreeConfig(ConfigSection):
    depth: int = config_field(4, help="Parse tree depth (prefix levels).", minimum=2)
    sim_threshold: float = config_field(
        0.4, help="Similarity threshold st in (0, 1].", maximum=1.0
    )
    max_children: int = config_field(
        100, help="Maximum children of an internal node.", minimum=1
    )
    mask_rules: List[MaskRule] = config_field(
        default_factory=default_mask_rules,
        help="Token masking rules, applied in order.",
    )

    def validate(self):
        if not 0 < self.sim_threshold <= 1:
            raise ConfigError(
                f"ParseTreeConfig.sim_threshold={self.sim_threshold} must be in (0, 1]"
            )


@dataclass
class SplitConfig(ConfigSection):
    train: float = config_field(0.7, help="Training share of blocks.", minimum=0.0)
    test: float = config_field(0.2, help="Test share of blocks.", minimum=0.0)
    val: float = config_field(0.1, help="Validation share of blocks.", minimum=0.0)

    def validate(self):
        if abs(self.train + self.test + self.val - 1.0) > 1e-9:
            raise ConfigError("Split shares must sum to 1")
        if self.train <= 0:
            raise ConfigError("Training split must be non-empty")


@dataclass
class WindowSpec(ConfigSection):
    w: int = config_field(50, help="Sliding window length.", minimum=1)
    stride: int = config_field(1, help="Step between windows.", minimum=1)


@dataclass
class ModelConfig(ConfigSection):
    window: int = config_field(
        50, help="Window length w. Overwritten from the window section.", minimum=1
    )
    metric_channels: int = config_field(
        0, help="Metric channel count n. Derived from data.", minimum=0
    )
    log_channels: int = config_field(
        0,
        help="Log channel count n' (templates plus the unknown column). Derived from data.",
        minimum=0,
    )
    embed_dim: int = config_field(128, help="Node embedding dimension d'.", minimum=1)
    layers: int = config_field(3, help="Number of Fourier graph operator layers q.", minimum=1)
    kernel_size: int = config_field(3, help="Odd temporal convolution kernel size.", minimum=1)
    alpha_m: float = config_field(0.0, help="Gaussian noise coefficient.", minimum=0.0)
    alpha_l: float = config_field(1.0, help="Poisson noise coefficient.", minimum=0.0)
    noise_variance: float = config_field(0.007, help="Gaussian variance sigma^2.", minimum=0.0)
    poisson_rate: float = config_field(1.0, help="Poisson rate lambda.", minimum=0.0)
    noise_target: str = config_field(
        "explicit",
        help="`explicit` uses alpha_m/alpha_l as given; `auto` keeps only the "
        "coefficient of the modality with at least twice the channels of the other.",
        choices=("explicit", "auto"),
    )
    percentile: float = config_field(
        95.0, help="Energy/variance threshold percentile.", minimum=0.0, maximum=100.0
    )
    accumulate_layers: bool = config_field(
        True, help="Sum all layer outputs instead of using the last layer only."
    )
    train_noise_only: bool = config_field(True, help="Inject noise only while training.")
    recompute_stats: bool = config_field(
        False, help="Recompute frequency statistics at every layer."
    )
    use_tfr: bool = config_field(True, help="Temporal convolution on each modality.")
    use_dni: bool = config_field(True, help="Training-time noise injection.")
    use_fff: bool = config_field(True, help="Frequency focus scaling.")
    modalities: str = config_field(
        "both",
        help="Modalities fed to the graph.",
        choices=("both", "metrics", "logs"),
    )

    def validate(self):
        if self.kernel_size % 2 != 1:
            raise ConfigError(f"ModelConfig.kernel_size={self.kernel_size} must be odd")
        if self.noise_target == "explicit" and self.alpha_m > 0 and self.alpha_l > 0:
            raise ConfigError(
                "At most one of ModelConfig.alpha_m and ModelConfig.alpha_l may be positive"
            )

    @property
    def channels(self) -> int:
        return self.metric_channels + self.log_channels

    @property
    def nodes(self) -> int:
        return self.window * self.channels


@dataclass
class TrainConfig(ConfigSection):
    lr: float = config_field(5e-4, help="Adam learning rate.", minimum=0.0)
    batch_size: int = config_field(256, help="Windows per optimizer step.", minimum=1)
    micro_batch: int = config_field(
        32, help="Windows per forward/backward chunk inside a batch.", minimum=1
    )
    max_epochs: int = config_field(100, help="Maximum epochs.", minimum=1)
    patience: int = config_field(
        10, help="Epochs without validation improvement before stopping.", minimum=1
    )
    seed: int = config_field(0, help="Seed for initialization, shuffling and noise.")
    beta1: float = config_field(0.9, help="Adam beta1.", minimum=0.0, maximum=1.0)
    beta2: float = config_field(0.999, help="Adam beta2.", minimum=0.0, maximum=1.0)
    eps: float = config_field(1e-8, help="Adam epsilon.", minimum=0.0)
    grad_clip: float = config_field(
        5.0, help="Global gradient norm clip. 0 disables.", minimum=0.0
    )

    def validate(self):
        if self.lr <= 0:
            raise ConfigError("TrainConfig.lr must be positive")


@dataclass
class DetectConfig(ConfigSection):
    threshold_policy: str = config_field(
        "best-f1", help="`best-f1` or `percentile:<x>`, fitted on validation scores."
    )
    fallback_percentile: float = config_field(
        99.0,
        help="Percentile used when best-f1 has single-class labels.",
        minimum=0.0,
        maximum=100.0,
    )
    chunk: int = config_field(64, help="Windows scored per forward pass.", minimum=1)

    def validate(self):
        if self.threshold_policy != "best-f1":
            match = _PERCENTILE_POLICY.match(self.threshold_policy)
            if match is None or float(match.group(1)) > 100:
                raise ConfigError(
                    f"Invalid threshold policy {self.threshold_policy!r}; expected "
                    "'best-f1' or 'percentile:<0-100>'"
                )


@dataclass
class MetricBaseline(ConfigSection):
    level: float = config_field(0.0, help="Mean value.")
    amplitude: float = config_field(1.0, help="Sinusoid amplitude.", minimum=0.0)
    period: int = config_field(360, help="Sinusoid period in blocks.", minimum=1)
    ar_coef: float = config_field(0.5, help="AR(1) coefficient.", minimum=-0.999, maximum=0.999)
    noise_std: float = config_field(0.2, help="AR(1) innovation std.", minimum=0.0)


@dataclass
class FaultSpec(ConfigSection):
    kind: str = config_field("metric_spike", help="Fault kind.", choices=FAULT_KINDS)
    start: int = config_field(0, help="First affected block.", minimum=0)
    duration: int = config_field(1, help="Affected blocks.", minimum=1)
    magnitude: float = config_field(
        4.0, help="Deviation in units of the metric noise scale."
    )
    channels: List[int] = config_field(
        default_factory=list,
        help="Affected metric ids (metric faults) or template ids (log faults).",
    )
    lag: int = config_field(0, help="Metric delay after the log burst, in blocks.", minimum=0)

    @property
    def end(self) -> int:
        """
        One past the last labeled block.
        """
        if self.kind == "correlated_lagged":
            return self.start + self.lag + self.duration
        return self.start + self.duration


@dataclass
class SynthConfig(ConfigSection):
    blocks: int = config_field(10_000, help="Number of time blocks T.", minimum=1)
    dt: int = config_field(10, help="Block length in seconds.", minimum=1)
    t0: int = config_field(1_700_000_000, help="Start time (UTC seconds).", minimum=0)
    metrics: int = config_field(8, help="Number of metrics n.", minimum=1)
    templates: int = config_field(40, help="Template pool size.", minimum=2)
    rare_templates: int = config_field(
        4, help="Pool templates never emitted outside faults.", minimum=1
    )
    seed: int = config_field(7, help="Generator seed.")
    metric_profile: List[MetricBaseline] = config_field(
        default_factory=list,
        help="Per-metric baselines. Drawn from the seed when empty.",
    )
    template_probs: List[float] = config_field(
        default_factory=list,
        help="Per-template occurrence probability per block. Drawn when empty.",
    )
    faults: List[FaultSpec] = config_field(
        default_factory=list, help="Explicit faults, applied in addition to planned ones."
    )
    anomaly_ratio: float = config_field(
        0.0,
        help="Target share of anomalous blocks for randomly planned faults.",
        minimum=0.0,
        maximum=0.5,
    )
    fault_kinds: List[str] = config_field(
        default_factory=lambda: list(FAULT_KINDS),
        help="Kinds cycled through by the fault planner.",
    )
    duration_range: List[int] = config_field(
        default_factory=lambda: [8, 24], help="Planned fault duration bounds (inclusive)."
    )
    magnitude_range: List[float] = config_field(
        default_factory=lambda: [3.0, 6.0], help="Planned fault magnitude bounds."
    )
    lag_choices: List[int] = config_field(
        default_factory=lambda: [1, 2, 3], help="Lags for correlated faults."
    )
    max_lines_per_occurrence: int = config_field(
        2, help="Upper bound on lines emitted per template occurrence.", minimum=1
    )

    def validate(self):
        if self.rare_templates >= self.templates:
            raise ConfigError("SynthConfig.rare_templates must be below templates")
        if self.metric_profile and len(self.metric_profile) != self.metrics:
            raise ConfigError("SynthConfig.metric_profile needs one entry per metric")
        if self.template_probs and len(self.template_probs) != self.templates:
            raise ConfigError("SynthConfig.template_probs needs one entry per template")
        for kind in self.fault_kinds:
            if kind not in FAULT_KINDS:
                raise ConfigError(f"Unknown fault kind {kind!r}")
        if len(self.duration_range) != 2 or self.duration_range[0] < 1:
            raise ConfigError("SynthConfig.duration_range must be [min, max] with min >= 1")
        if len(self.magnitude_range) != 2:
            raise ConfigError("SynthConfig.magnitude_range must be [min, max]")
        for fault in self.faults:
            if fault.end > self.blocks:
                raise ConfigError(
                    f"Fault {fault.kind} at block {fault.start} ends at {fault.end}, "
                    f"past T={self.blocks}"
                )


@dataclass
class RunConfig(ConfigSection):
    output_dir: str = config_field("ffad-run", help="Directory for all stage outputs.")
    ingest: IngestConfig = config_field(default_factory=IngestConfig)
    parse_tree: ParseTreeConfig = config_field(default_factory=ParseTreeConfig)
    split: SplitConfig = config_field(default_factory=SplitConfig)
    window: WindowSpec = config_field(default_factory=WindowSpec)
    model: ModelConfig = config_field(default_factory=ModelConfig)
    train: TrainConfig = config_field(default_factory=TrainConfig)
    detect: DetectConfig = config_field(default_factory=DetectConfig)
    synth: SynthConfig = config_field(default_factory=SynthConfig)

    def config_hash(self) -> str:
        """
        Short stable hash of the configuration. `output_dir` is left out, so the same
        settings hash identically wherever the run is written.
        """
        data = self.to_dict()
        data.pop("output_dir", None)
        return hash_dict(data)


def hash_dict(data: Mapping[str, Any]) -> str:
    payload = json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def load_config(path: Union[str, Path]) -> RunConfig:
    """
    Load a `RunConfig` from a YAML file.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file {path} does not exist")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"Unable to parse config file {path}: {exc}") from exc
    return RunConfig.from_dict(data or {})


def load_profile(name: str = "benchmark") -> RunConfig:
    """
    Load a configuration profile shipped with the package.
    """
    try:
        text = resources.read_text("ffad.profiles", f"{name}.yaml")
    except FileNotFoundError as exc:
        raise ConfigError(f"No shipped profile named {name!r}") from exc
    return RunConfig.from_dict(yaml.safe_load(text) or {})


def dump_config(config: RunConfig, path: Union[str, Path]):
    """
    Write a `RunConfig` as YAML.
    """
    with Path(path).open("w") as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=False)
