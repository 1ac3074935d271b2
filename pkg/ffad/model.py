"""
The FFAD reconstruction network.

A window of metric values `m` (w x n) and log occurrences `l` (w x n') flows through

1. temporal feature retention: one same-length convolution plus ReLU per modality,
2. dual noise injection (training only): Gaussian noise on one modality or Poisson
   noise on the other,
3. the fusion graph: every (time, channel) scalar becomes one of `N = w * (n + n')`
   nodes of a fully connected graph, lifted to `d'` dimensions by a shared affine map,
4. a DFT over the node axis, `q` Fourier graph operator layers gated by the frequency
   focus scale, and an inverse DFT,
5. a linear projection back to `w x (n + n')`.

The loss is the mean squared error against the clean input window.
"""

import hashlib
import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from ffad.config import ModelConfig
from ffad.errors import ConfigError, DataError
from ffad.numerics import tensor as T
from ffad.numerics.tensor import Tensor

logger = logging.getLogger(__name__)

# Independent random streams derived from the run seed.
INIT_STREAM = 0
SHUFFLE_STREAM = 1
NOISE_STREAM = 2


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


class ModelParams:
    """
    Ordered collection of learnable tensors.

    Names, in declared order:

    - `tfr_metrics.kernel` (n, n, k), `tfr_metrics.bias` (n,)
    - `tfr_logs.kernel` (n', n', k), `tfr_logs.bias` (n',)
    - `embed.weight` (d',), `embed.bias` scalar
    - `fgo.<p>.weight` complex (d', d'), `fgo.<p>.bias` complex (d',) for each layer
    - `proj.weight` (s, n + n'), `proj.bias` (n + n',) with `s = (n + n') d'`
    - `theta` scalar; the frequency focus scale is `sigmoid(theta)`
    """

    def __init__(self, tensors: Mapping[str, Tensor]):
        self._tensors: Dict[str, Tensor] = dict(tensors)

    @staticmethod
    def names(config: ModelConfig) -> List[str]:
        names = [
            "tfr_metrics.kernel",
            "tfr_metrics.bias",
            "tfr_logs.kernel",
            "tfr_logs.bias",
            "embed.weight",
            "embed.bias",
        ]
        for p in range(config.layers):
            names += [f"fgo.{p}.weight", f"fgo.{p}.bias"]
        names += ["proj.weight", "proj.bias", "theta"]
        return names

    @staticmethod
    def shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
        n, nl, k = config.metric_channels, config.log_channels, config.kernel_size
        d, c = config.embed_dim, config.channels
        shapes = {
            "tfr_metrics.kernel": (n, n, k),
            "tfr_metrics.bias": (n,),
            "tfr_logs.kernel": (nl, nl, k),
            "tfr_logs.bias": (nl,),
            "embed.weight": (d,),
            "embed.bias": (),
        }
        for p in range(config.layers):
            shapes[f"fgo.{p}.weight"] = (d, d)
            shapes[f"fgo.{p}.bias"] = (d,)
        shapes.update({"proj.weight": (c * d, c), "proj.bias": (c,), "theta": ()})
        return shapes

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "ModelParams":
        """
        Random initialization. Kernels and the projection are uniform in
        `+-sqrt(1 / fan_in)`; complex weights draw real and imaginary parts each uniform
        in `+-sqrt(1 / d')`; `theta = 0` so the focus scale starts at 0.5.
        """
        if config.channels == 0:
            raise ConfigError("Model needs at least one metric or log channel")
        rng = np.random.default_rng([seed, INIT_STREAM])
        d = config.embed_dim
        tensors = {}
        for name, shape in cls.shapes(config).items():
            if name.startswith("fgo."):
                bound = np.sqrt(1.0 / d)
                data = rng.uniform(-bound, bound, shape) + 1j * rng.uniform(-bound, bound, shape)
            elif name == "theta" or name.endswith(".bias"):
                data = np.zeros(shape)
            elif name.startswith("tfr_"):
                fan_in = shape[1] * shape[2]
                bound = np.sqrt(1.0 / fan_in) if fan_in else 0.0
                data = rng.uniform(-bound, bound, shape)
            elif name == "embed.weight":
                data = rng.uniform(-1.0, 1.0, shape)
            else:
                data = rng.uniform(-np.sqrt(1.0 / shape[0]), np.sqrt(1.0 / shape[0]), shape)
            tensors[name] = Tensor(data, requires_grad=True, name=name)

        params = cls(tensors)
        logger.info("Initialized model with %d parameters", params.count())
        return params

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: Mapping[str, np.ndarray]) -> "ModelParams":
        """
        Rebuild from named arrays, checking names and shapes against `config`.
        """
        shapes = cls.shapes(config)
        missing = [name for name in shapes if name not in arrays]
        if missing:
            raise DataError(f"Parameter arrays missing {missing}")
        tensors = {}
        for name, shape in shapes.items():
            data = np.asarray(arrays[name])
            if data.shape != shape:
                raise DataError(
                    f"Parameter {name} has shape {data.shape}, model expects {shape}"
                )
            tensors[name] = Tensor(data.copy(), requires_grad=True, name=name)
        return cls(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self._tensors.items()}

    def grads(self) -> Dict[str, np.ndarray]:
        return {name: T.gradient(t) for name, t in self._tensors.items()}

    def zero_grad(self):
        for t in self._tensors.values():
            t.zero_grad()

    def copy(self) -> "ModelParams":
        return ModelParams(
            {
                name: Tensor(t.data.copy(), requires_grad=True, name=name)
                for name, t in self._tensors.items()
            }
        )

    def count(self) -> int:
        """
        Number of real scalars; complex entries count twice.
        """
        return sum(t.data.size * (2 if t.is_complex else 1) for t in self._tensors.values())

    def checksum(self) -> str:
        """
        SHA-256 over the parameter bytes in declared order.
        """
        digest = hashlib.sha256()
        for name, t in self._tensors.items():
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(t.data).tobytes())
        return digest.hexdigest()

    @property
    def focus_scale(self) -> float:
        return float(sigmoid(self._tensors["theta"].data))


@dataclass
class FrequencyStats:
    """
    Per-window frequency focus statistics over `N` node-spectrum components.

    All arrays have shape `(..., N)` except the thresholds, which are `(..., 1)`.
    """

    energy: np.ndarray
    variance: np.ndarray
    energy_threshold: np.ndarray
    variance_threshold: np.ndarray
    mask: np.ndarray
    scale: np.ndarray

    @property
    def masked_fraction(self) -> np.ndarray:
        return self.mask.mean(axis=-1)


def fff_stats(spectrum: np.ndarray, percentile: float, theta: float = 0.0) -> FrequencyStats:
    """
    Energy and amplitude-variance gate of a node spectrum.

    Args:
        spectrum: complex `(..., N, d')` array.
        percentile: threshold percentile in [0, 100], linear interpolation over the
            window's own components.
        theta: focus parameter; masked components scale by `sigmoid(theta)`.

    Returns:
        `FrequencyStats`. A component is masked iff both its energy and its amplitude
        variance strictly exceed their thresholds.
    """
    spectrum = np.asarray(spectrum)
    if spectrum.ndim < 2 or spectrum.shape[-2] < 1:
        raise ValueError(f"Spectrum needs shape (..., N, d') with N >= 1, got {spectrum.shape}")
    magnitude = np.abs(spectrum)
    energy = (magnitude**2).sum(axis=-1)
    variance = magnitude.var(axis=-1)
    e_th = np.percentile(energy, percentile, axis=-1, keepdims=True)
    v_th = np.percentile(variance, percentile, axis=-1, keepdims=True)
    mask = (energy > e_th) & (variance > v_th)
    scale = np.where(mask, sigmoid(np.asarray(theta, dtype=np.float64)), 1.0)
    return FrequencyStats(energy, variance, e_th, v_th, mask, scale)


def _check_window(metrics: Tensor, logs: Tensor, config: ModelConfig):
    w, n, nl = config.window, config.metric_channels, config.log_channels
    if metrics.shape[-2:] != (w, n) or logs.shape[-2:] != (w, nl):
        raise DataError(
            f"Window shapes {metrics.shape} / {logs.shape} don't match the model "
            f"(w={w}, n={n}, n'={nl})"
        )
    if metrics.shape[:-2] != logs.shape[:-2]:
        raise DataError("Metric and log windows have different batch shapes")


def tfr_forward(metrics: Tensor, logs: Tensor, params: ModelParams) -> Tuple[Tensor, Tensor]:
    """
    Same-length temporal convolution plus ReLU on each modality. A modality with zero
    channels passes through.
    """
    if metrics.shape[-1]:
        metrics = T.relu(
            T.conv1d_same(metrics, params["tfr_metrics.kernel"], params["tfr_metrics.bias"])
        )
    if logs.shape[-1]:
        logs = T.relu(T.conv1d_same(logs, params["tfr_logs.kernel"], params["tfr_logs.bias"]))
    return metrics, logs


def resolve_noise(config: ModelConfig) -> Tuple[float, float]:
    """
    Effective `(alpha_m, alpha_l)`.

    With `noise_target="auto"` the coefficient of the modality holding at least twice
    the channels of the other is kept and the other is zeroed; with neither dominant both
    are zero.
    """
    if not config.use_dni:
        return 0.0, 0.0
    if config.noise_target == "explicit":
        return config.alpha_m, config.alpha_l
    n, nl = config.metric_channels, config.log_channels
    if n >= 2 * nl and n > 0:
        return config.alpha_m, 0.0
    if nl >= 2 * n and nl > 0:
        return 0.0, config.alpha_l
    return 0.0, 0.0


def dni_inject(
    metrics: Tensor,
    logs: Tensor,
    config: ModelConfig,
    rng: Optional[np.random.Generator],
    training: bool,
) -> Tuple[Tensor, Tensor]:
    """
    Add `alpha_m * N(0, sigma^2)` to the metric features or `alpha_l * Pois(lambda)`
    to the log features. Inputs pass through unchanged when noise is off.
    """
    if not isinstance(metrics, Tensor):
        metrics = Tensor(metrics)
    if not isinstance(logs, Tensor):
        logs = Tensor(logs)

    alpha_m, alpha_l = resolve_noise(config)
    if alpha_m > 0 and alpha_l > 0:
        raise ConfigError("Noise is injected into at most one modality")
    active = training or not config.train_noise_only
    if not active or (alpha_m == 0 and alpha_l == 0):
        return metrics, logs
    if rng is None:
        raise ValueError("Noise injection needs a random generator")

    if alpha_m > 0:
        eps = rng.normal(0.0, np.sqrt(config.noise_variance), metrics.shape)
        metrics = T.add(metrics, alpha_m * eps)
    if alpha_l > 0:
        eps = rng.poisson(config.poisson_rate, logs.shape)
        logs = T.add(logs, alpha_l * eps)
    return metrics, logs


def build_fusion_graph(metrics: Tensor, logs: Tensor) -> Tensor:
    """
    Flatten `(..., w, n)` and `(..., w, n')` into `(..., N)` node values, metric block
    first, each block time-major.
    """
    lead = metrics.shape[:-2]
    parts = [
        T.reshape(metrics, lead + (metrics.shape[-2] * metrics.shape[-1],)),
        T.reshape(logs, lead + (logs.shape[-2] * logs.shape[-1],)),
    ]
    return T.concat(parts, axis=-1)


def embed_nodes(nodes: Tensor, params: ModelParams) -> Tensor:
    return T.embed(nodes, params["embed.weight"], params["embed.bias"])


def fgo_layer(
    hidden: Tensor,
    weight: Tensor,
    bias: Tensor,
    mask: Optional[np.ndarray],
    theta: Optional[Tensor],
) -> Tensor:
    """
    One Fourier graph operator layer: `crelu((H S + b) * scale)`, scaling masked
    frequency rows by `sigmoid(theta)`. `mask=None` skips the scaling.
    """
    out = T.add(T.matmul(hidden, weight), bias)
    if mask is not None:
        out = T.scale_rows(out, mask, theta)
    return T.complex_relu(out)


def graph_forward(
    features: Tensor, params: ModelParams, config: ModelConfig
) -> Tuple[Tensor, Optional[FrequencyStats]]:
    """
    DFT over nodes, `q` gated FGO layers, inverse DFT.

    Args:
        features: real `(..., N, d')` node embeddings.

    Returns:
        The real part of the inverse transform and the frequency statistics of the
        initial spectrum (`None` when focus is disabled).
    """
    spectrum = T.dft(features)
    theta = params["theta"]

    def gate(h: Tensor) -> Optional[FrequencyStats]:
        if not config.use_fff:
            return None
        return fff_stats(h.data, config.percentile, float(theta.data))

    stats = gate(spectrum)
    layer_stats = stats
    hidden = spectrum
    total = None
    for p in range(config.layers):
        if p > 0 and config.recompute_stats:
            layer_stats = gate(hidden)
        hidden = fgo_layer(
            hidden,
            params[f"fgo.{p}.weight"],
            params[f"fgo.{p}.bias"],
            None if layer_stats is None else layer_stats.mask,
            theta,
        )
        if config.accumulate_layers:
            total = hidden if total is None else T.add(total, hidden)
    output = total if config.accumulate_layers else hidden

    inverse = T.idft(output)
    if logger.isEnabledFor(logging.DEBUG):
        logger.debug(
            "Inverse DFT imaginary residue %.3e", float(np.abs(inverse.data.imag).max(initial=0.0))
        )
    return T.real(inverse), stats


def output_projection(
    z: Tensor, params: ModelParams, config: ModelConfig
) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Regroup `(..., N, d')` node features per time step to `(..., w, s)` and map them to
    `(..., w, n + n')`.

    Returns:
        The full reconstruction and its metric and log column blocks.
    """
    w, n, nl, d = config.window, config.metric_channels, config.log_channels, config.embed_dim
    lead = z.shape[:-2]
    if z.shape[-2:] != (w * (n + nl), d):
        raise DataError(f"Graph output shape {z.shape} doesn't match w * (n + n') x d'")

    z_metrics = T.reshape(T.take(z, 0, w * n, axis=-2), lead + (w, n, d))
    z_logs = T.reshape(T.take(z, w * n, w * (n + nl), axis=-2), lead + (w, nl, d))
    grouped = T.reshape(T.concat([z_metrics, z_logs], axis=-2), lead + (w, (n + nl) * d))
    recon = T.add(T.matmul(grouped, params["proj.weight"]), params["proj.bias"])
    return recon, T.take(recon, 0, n, axis=-1), T.take(recon, n, n + nl, axis=-1)


@dataclass
class ForwardPass:
    reconstruction: np.ndarray
    """(..., w, n + n') model output."""
    loss: Tensor
    """Scalar mean squared error over every element."""
    errors: np.ndarray
    """Per-window mean squared error, shape `(...)`."""
    stats: Optional[FrequencyStats]


def forward(
    metrics: np.ndarray,
    logs: np.ndarray,
    params: ModelParams,
    config: ModelConfig,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> ForwardPass:
    """
    Full reconstruction pass for one window `(w, *)` or a batch `(B, w, *)`.

    Run inside a `Tape` to differentiate `loss`.
    """
    metrics_in, logs_in = Tensor(metrics), Tensor(logs)
    _check_window(metrics_in, logs_in, config)
    target = np.concatenate([metrics_in.data, logs_in.data], axis=-1)

    m, l = metrics_in, logs_in
    if config.use_tfr:
        m, l = tfr_forward(m, l, params)
    m, l = dni_inject(m, l, config, rng, training)
    nodes = build_fusion_graph(m, l)
    z, stats = graph_forward(embed_nodes(nodes, params), params, config)
    recon, _, _ = output_projection(z, params, config)

    loss = T.mse(recon, target)
    residual = recon.data - target
    errors = (residual * residual).mean(axis=(-2, -1))
    return ForwardPass(reconstruction=recon.data, loss=loss, errors=errors, stats=stats)
