"""
Adam training with early stopping and resumable checkpoints.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from ffad.config import ModelConfig, TrainConfig
from ffad.errors import DataError, NumericError
from ffad.model import NOISE_STREAM, SHUFFLE_STREAM, ModelParams, forward
from ffad.numerics.tensor import Tape
from ffad.series import WindowBatch

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

Arrays = Dict[str, np.ndarray]


def _real(a: np.ndarray) -> np.ndarray:
    """
    Real coordinates of `a`; complex entries become (re, im) pairs.
    """
    a = np.asarray(a)
    return np.ascontiguousarray(a).view(np.float64) if np.iscomplexobj(a) else a


def _like(real: np.ndarray, ref: np.ndarray) -> np.ndarray:
    return real.view(np.complex128) if np.iscomplexobj(ref) else real


@dataclass
class AdamMoments:
    """
    First and second moment estimates and the step count. Complex parameters keep
    separate moments for their real and imaginary parts.
    """

    m: Arrays
    v: Arrays
    step: int = 0

    @classmethod
    def zeros(cls, params: Arrays) -> "AdamMoments":
        return cls(
            m={k: np.zeros_like(a) for k, a in params.items()},
            v={k: np.zeros_like(a) for k, a in params.items()},
        )


def adam_step(
    params: Arrays, grads: Arrays, moments: AdamMoments, config: TrainConfig
) -> Tuple[Arrays, AdamMoments]:
    """
    One bias-corrected Adam update.

    Returns:
        New parameter arrays and moments; the inputs are left untouched.
    """
    t = moments.step + 1
    bc1 = 1.0 - config.beta1**t
    bc2 = 1.0 - config.beta2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, value in params.items():
        g = _real(grads[name])
        m = config.beta1 * _real(moments.m[name]) + (1.0 - config.beta1) * g
        v = config.beta2 * _real(moments.v[name]) + (1.0 - config.beta2) * g * g
        step = config.lr * (m / bc1) / (np.sqrt(v / bc2) + config.eps)
        new_params[name] = _like(_real(value) - step, value)
        new_m[name] = _like(m, value)
        new_v[name] = _like(v, value)
    return new_params, AdamMoments(m=new_m, v=new_v, step=t)


def clip_grad_norm(grads: Arrays, max_norm: float) -> Tuple[Arrays, float]:
    """
    Rescale gradients so their global norm is at most `max_norm` (0 disables).
    """
    norm = float(np.sqrt(sum(float(np.sum(_real(g) ** 2)) for g in grads.values())))
    if max_norm <= 0 or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


class EarlyStopping:
    """
    Track the best validation loss. `update` returns True once more than `patience`
    consecutive evaluations have failed to improve on the best.
    """

    def __init__(self, patience: int, best: float = float("inf"), stale: int = 0):
        self.patience = patience
        self.best = best
        self.stale = stale

    def update(self, loss: float) -> Tuple[bool, bool]:
        """
        Returns:
            `(improved, stop)`.
        """
        if loss < self.best:
            self.best = loss
            self.stale = 0
            return True, False
        self.stale += 1
        return False, self.stale > self.patience


@dataclass
class Checkpoint:
    """
    Training snapshot: best and latest parameters, optimizer moments and loop state.
    """

    model_config: ModelConfig
    train_config: TrainConfig
    params: ModelParams
    """Parameters with the best validation loss."""
    last_params: ModelParams
    moments: AdamMoments
    epoch: int = 0
    """Completed epochs."""
    best_epoch: int = 0
    best_loss: float = float("inf")
    stale: int = 0
    config_hash: str = ""
    history: List[Dict] = field(default_factory=list)
    finished: bool = False

    def save(self, path: Union[str, Path]):
        """
        Write a single `.npz` archive with a JSON `meta` record and one array per
        parameter and moment.
        """
        arrays = {}
        for prefix, group in (
            ("best", self.params.arrays()),
            ("last", self.last_params.arrays()),
            ("adam_m", self.moments.m),
            ("adam_v", self.moments.v),
        ):
            for name, value in group.items():
                arrays[f"{prefix}/{name}"] = value
        meta = {
            "format_version": CHECKPOINT_VERSION,
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config.to_dict(),
            "state": {
                "epoch": self.epoch,
                "step": self.moments.step,
                "best_epoch": self.best_epoch,
                "best_loss": self.best_loss if np.isfinite(self.best_loss) else None,
                "stale": self.stale,
                "finished": self.finished,
                "history": self.history,
            },
            "param_order": list(self.params),
            "config_hash": self.config_hash,
            "checksum": self.params.checksum(),
        }
        path = Path(path)
        with path.open("wb") as f:
            np.savez(f, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)
        logger.info("Wrote checkpoint %s (epoch %d)", path, self.epoch)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"Checkpoint {path} does not exist")
        with np.load(path, allow_pickle=False) as archive:
            try:
                meta = json.loads(str(archive["meta"]))
            except (KeyError, ValueError) as exc:
                raise DataError(f"Checkpoint {path} has no readable meta record") from exc
            if meta.get("format_version") != CHECKPOINT_VERSION:
                raise DataError(
                    f"Checkpoint {path} has format version {meta.get('format_version')}, "
                    f"expected {CHECKPOINT_VERSION}"
                )
            groups: Dict[str, Arrays] = {"best": {}, "last": {}, "adam_m": {}, "adam_v": {}}
            for key in archive.files:
                if key == "meta":
                    continue
                prefix, name = key.split("/", 1)
                groups[prefix][name] = archive[key]

        model_config = ModelConfig.from_dict(meta["model_config"], "model")
        params = ModelParams.from_arrays(model_config, groups["best"])
        if params.checksum() != meta["checksum"]:
            raise DataError(f"Checkpoint {path} failed its parameter checksum")

        state = meta["state"]
        best_loss = state["best_loss"]
        return cls(
            model_config=model_config,
            train_config=TrainConfig.from_dict(meta["train_config"], "train"),
            params=params,
            last_params=ModelParams.from_arrays(model_config, groups["last"]),
            moments=AdamMoments(
                m=groups["adam_m"], v=groups["adam_v"], step=state["step"]
            ),
            epoch=state["epoch"],
            best_epoch=state["best_epoch"],
            best_loss=float("inf") if best_loss is None else best_loss,
            stale=state["stale"],
            config_hash=meta["config_hash"],
            history=state["history"],
            finished=state["finished"],
        )

    def loss_curve(self) -> pd.DataFrame:
        return pd.DataFrame(
            self.history, columns=["epoch", "train_loss", "val_loss", "best"]
        )


def batch_gradients(
    batch: WindowBatch,
    params: ModelParams,
    model_config: ModelConfig,
    micro_batch: int,
    rng_key: Tuple[int, ...],
) -> Tuple[float, Arrays]:
    """
    Mean loss and gradient over a batch, evaluated in fixed-order micro-batches.
    """
    total = len(batch)
    loss_sum = 0.0
    grads: Optional[Arrays] = None
    for chunk, lo in enumerate(range(0, total, micro_batch)):
        hi = min(lo + micro_batch, total)
        rng = np.random.default_rng(list(rng_key) + [chunk])
        params.zero_grad()
        with Tape() as tape:
            result = forward(
                batch.metrics[lo:hi],
                batch.logs[lo:hi],
                params,
                model_config,
                training=True,
                rng=rng,
            )
        tape.backward(result.loss)
        weight = (hi - lo) / total
        loss_sum += float(result.loss.data) * weight
        chunk_grads = params.grads()
        if grads is None:
            grads = {k: g * weight for k, g in chunk_grads.items()}
        else:
            for k, g in chunk_grads.items():
                grads[k] = grads[k] + g * weight
    params.zero_grad()
    assert grads is not None
    return loss_sum, grads


def evaluate_loss(
    batch: Optional[WindowBatch], params: ModelParams, model_config: ModelConfig, chunk: int
) -> float:
    """
    Noise-free mean reconstruction loss over every window of `batch`.
    """
    if batch is None or len(batch) == 0:
        return float("nan")
    errors = []
    for lo in range(0, len(batch), chunk):
        result = forward(
            batch.metrics[lo : lo + chunk], batch.logs[lo : lo + chunk], params, model_config
        )
        errors.append(result.errors)
    return float(np.concatenate(errors).mean())


def fit(
    train: WindowBatch,
    val: Optional[WindowBatch],
    model_config: ModelConfig,
    train_config: TrainConfig,
    resume: Optional[Checkpoint] = None,
    config_hash: str = "",
) -> Checkpoint:
    """
    Train until `max_epochs` or early stopping.

    Args:
        train: training windows (non-empty).
        val: validation windows. When empty, stopping uses the training loss.
        resume: continue from this checkpoint's latest parameters and optimizer state.

    Returns:
        The final checkpoint; `checkpoint.params` holds the best parameters.
    """
    if len(train) == 0:
        raise DataError("No training windows")
    if val is None or len(val) == 0:
        logger.warning("Validation split is empty; early stopping uses the training loss")
        val = None

    seed = train_config.seed
    batch_size = min(train_config.batch_size, len(train))
    micro = min(train_config.micro_batch, batch_size)

    if resume is not None:
        ckpt = resume
        ckpt.train_config = train_config
        params = ckpt.last_params.copy()
        logger.info("Resuming from epoch %d", ckpt.epoch)
    else:
        params = ModelParams.init(model_config, seed)
        ckpt = Checkpoint(
            model_config=model_config,
            train_config=train_config,
            params=params.copy(),
            last_params=params.copy(),
            moments=AdamMoments.zeros(params.arrays()),
            config_hash=config_hash,
        )
    stopper = EarlyStopping(train_config.patience, ckpt.best_loss, ckpt.stale)
    moments = ckpt.moments

    for epoch in range(ckpt.epoch, train_config.max_epochs):
        if ckpt.finished:
            break
        order = np.random.default_rng([seed, SHUFFLE_STREAM, epoch]).permutation(len(train))
        losses = []
        for number, lo in enumerate(range(0, len(train), batch_size)):
            idx = order[lo : lo + batch_size]
            batch = WindowBatch(
                metrics=train.metrics[idx],
                logs=train.logs[idx],
                labels=train.labels[idx],
                starts=train.starts[idx],
            )
            loss, grads = batch_gradients(
                batch, params, model_config, micro, (seed, NOISE_STREAM, epoch, number)
            )
            if not np.isfinite(loss):
                raise NumericError(
                    f"Non-finite training loss {loss} at epoch {epoch} batch {number} "
                    f"(windows starting at blocks {batch.starts[:8].tolist()}...)"
                )
            grads, norm = clip_grad_norm(grads, train_config.grad_clip)
            logger.debug("epoch %d batch %d loss %.6g grad norm %.4g", epoch, number, loss, norm)
            updated, moments = adam_step(params.arrays(), grads, moments, train_config)
            params = ModelParams.from_arrays(model_config, updated)
            losses.append(loss * len(idx))

        train_loss = float(np.sum(losses) / len(train))
        if val is not None:
            val_loss = evaluate_loss(val, params, model_config, micro)
            if not np.isfinite(val_loss):
                raise NumericError(f"Non-finite validation loss at epoch {epoch}")
        else:
            val_loss = train_loss

        improved, stop = stopper.update(val_loss)
        if improved:
            ckpt.params = params.copy()
            ckpt.best_epoch = epoch
        ckpt.epoch = epoch + 1
        ckpt.best_loss, ckpt.stale = stopper.best, stopper.stale
        ckpt.last_params = params.copy()
        ckpt.moments = moments
        ckpt.history.append(
            {
                "epoch": epoch,
                "train_loss": train_loss,
                "val_loss": val_loss,
                "best": improved,
            }
        )
        logger.info(
            "epoch %d: train %.6g val %.6g%s", epoch, train_loss, val_loss, " *" if improved else ""
        )
        if stop:
            logger.info(
                "Early stopping after epoch %d; best epoch %d (val %.6g)",
                epoch,
                ckpt.best_epoch,
                ckpt.best_loss,
            )
            ckpt.finished = True
            break

    return ckpt

