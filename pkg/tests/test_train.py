import json
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from ffad.config import ModelConfig, TrainConfig
from ffad.errors import DataError
from ffad.model import ModelParams
from ffad.series import WindowBatch
from ffad.train import (
    AdamMoments,
    Checkpoint,
    EarlyStopping,
    adam_step,
    batch_gradients,
    clip_grad_norm,
    evaluate_loss,
    fit,
)

MODEL = ModelConfig(
    window=4, metric_channels=2, log_channels=2, embed_dim=4, layers=2, alpha_l=0.0
)
NOISY = replace(MODEL, alpha_l=0.5)
TRAIN = TrainConfig(lr=1e-2, batch_size=4, micro_batch=2, max_epochs=4, patience=10, seed=3)


def _batch(count: int, config: ModelConfig = MODEL, seed: int = 0) -> WindowBatch:
    rng = np.random.default_rng(seed)
    return WindowBatch(
        metrics=rng.normal(size=(count, config.window, config.metric_channels)),
        logs=(rng.random((count, config.window, config.log_channels)) < 0.3).astype(float),
        labels=np.zeros(count, dtype=np.int8),
        starts=np.arange(count, dtype=np.int64),
    )


def test_adam_step_by_hand():
    config = TrainConfig(lr=0.1)
    params = {"w": np.array([1.0, -2.0]), "c": np.array([1 + 1j])}
    grads = {"w": np.array([2.0, 0.0]), "c": np.array([2 - 4j])}
    new, moments = adam_step(params, grads, AdamMoments.zeros(params), config)

    # first step: m_hat = g and v_hat = g^2, so each coordinate moves by lr * sign(g)
    np.testing.assert_allclose(new["w"], [0.9, -2.0], rtol=0, atol=1e-8)
    np.testing.assert_allclose(new["c"], [0.9 + 1.1j], rtol=0, atol=1e-8)
    assert moments.step == 1
    np.testing.assert_allclose(moments.m["w"], [0.2, 0.0])
    np.testing.assert_allclose(moments.v["w"], [0.004, 0.0])
    np.testing.assert_allclose(moments.v["c"], [0.004 + 0.016j])
    # inputs are untouched
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])

    again, moments = adam_step(new, grads, moments, config)
    assert moments.step == 2
    np.testing.assert_allclose(again["w"][0], 0.8, atol=1e-8)


def test_clip_grad_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4j])}
    clipped, norm = clip_grad_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    np.testing.assert_allclose(clipped["a"], [0.6])
    np.testing.assert_allclose(clipped["b"], [0.8j])

    same, _ = clip_grad_norm(grads, 10.0)
    assert same is grads
    assert clip_grad_norm(grads, 0.0)[0] is grads


def test_early_stopping():
    stopper = EarlyStopping(patience=1)
    assert stopper.update(1.0) == (True, False)
    assert stopper.update(0.5) == (True, False)
    assert stopper.update(0.6) == (False, False)
    # stops two evaluations after the best
    assert stopper.update(0.7) == (False, True)
    assert stopper.best == 0.5

    # equal losses don't count as improvement
    stopper = EarlyStopping(patience=2, best=1.0)
    assert stopper.update(1.0) == (False, False)


def test_batch_gradients_micro_batch_invariance():
    batch = _batch(6)
    params = ModelParams.init(MODEL, seed=0)
    loss_a, grads_a = batch_gradients(batch, params, MODEL, 6, (0, 2, 0, 0))
    loss_b, grads_b = batch_gradients(batch, params, MODEL, 4, (0, 2, 0, 0))
    assert loss_a == pytest.approx(loss_b, rel=1e-12)
    for name in grads_a:
        np.testing.assert_allclose(grads_a[name], grads_b[name], rtol=1e-9, atol=1e-12)
    assert evaluate_loss(batch, params, MODEL, 4) == pytest.approx(loss_a, rel=1e-12)
    assert np.isnan(evaluate_loss(None, params, MODEL, 4))


def test_batch_gradients_noise_is_keyed():
    batch = _batch(4, NOISY)
    params = ModelParams.init(NOISY, seed=0)
    a, _ = batch_gradients(batch, params, NOISY, 2, (0, 2, 0, 0))
    b, _ = batch_gradients(batch, params, NOISY, 2, (0, 2, 0, 0))
    c, _ = batch_gradients(batch, params, NOISY, 2, (0, 2, 0, 1))
    assert a == b
    assert a != c


def test_fit_is_deterministic():
    train, val = _batch(10, NOISY), _batch(4, NOISY, seed=1)
    a = fit(train, val, NOISY, TRAIN)
    b = fit(train, val, NOISY, TRAIN)
    assert a.params.checksum() == b.params.checksum()
    assert a.history == b.history
    assert len(a.history) == 4
    assert a.epoch == 4

    c = fit(train, val, NOISY, replace(TRAIN, seed=4))
    assert c.params.checksum() != a.params.checksum()


def test_fit_resume_matches_uninterrupted(tmp_path: Path):
    train, val = _batch(10, NOISY), _batch(4, NOISY, seed=1)
    full = fit(train, val, NOISY, TRAIN)

    partial = fit(train, val, NOISY, replace(TRAIN, max_epochs=2))
    assert partial.epoch == 2
    partial.save(tmp_path / "checkpoint.npz")
    resumed = fit(
        train, val, NOISY, TRAIN, resume=Checkpoint.load(tmp_path / "checkpoint.npz")
    )
    assert resumed.epoch == 4
    assert resumed.last_params.checksum() == full.last_params.checksum()
    assert resumed.params.checksum() == full.params.checksum()
    assert [h["val_loss"] for h in resumed.history] == [h["val_loss"] for h in full.history]


def test_fit_early_stops(monkeypatch: pytest.MonkeyPatch):
    losses = iter([1.0, 0.5, 0.6, 0.7, 0.1])
    monkeypatch.setattr("ffad.train.evaluate_loss", lambda *args: next(losses))
    ckpt = fit(_batch(8), _batch(4, seed=1), MODEL, replace(TRAIN, patience=1, max_epochs=20))
    assert ckpt.finished
    assert ckpt.best_epoch == 1
    assert ckpt.best_loss == 0.5
    assert ckpt.epoch == 4
    assert [row["best"] for row in ckpt.history] == [True, True, False, False]
    assert ckpt.params.checksum() != ckpt.last_params.checksum()

    # a finished checkpoint doesn't train further on resume
    again = fit(_batch(8), _batch(4, seed=1), MODEL, replace(TRAIN, max_epochs=20), resume=ckpt)
    assert again.epoch == 4


def test_fit_empty_splits(caplog: pytest.LogCaptureFixture):
    train = _batch(6)
    empty = WindowBatch(
        metrics=np.zeros((0, 4, 2)),
        logs=np.zeros((0, 4, 2)),
        labels=np.zeros(0, dtype=np.int8),
        starts=np.zeros(0, dtype=np.int64),
    )
    with caplog.at_level(logging.WARNING):
        ckpt = fit(train, empty, MODEL, replace(TRAIN, max_epochs=2))
    assert "Validation split is empty" in caplog.text
    for row in ckpt.history:
        assert row["val_loss"] == row["train_loss"]

    with pytest.raises(DataError, match="No training windows"):
        fit(empty, train, MODEL, TRAIN)


def test_fit_reduces_loss_on_constant_data():
    config = ModelConfig(
        window=4, metric_channels=1, log_channels=1, embed_dim=4, layers=1, alpha_l=0.0
    )
    count = 8
    batch = WindowBatch(
        metrics=np.full((count, 4, 1), 0.5),
        logs=np.ones((count, 4, 1)),
        labels=np.zeros(count, dtype=np.int8),
        starts=np.arange(count, dtype=np.int64),
    )
    train_config = TrainConfig(
        lr=1e-2, batch_size=count, micro_batch=count, max_epochs=200, patience=200
    )
    ckpt = fit(batch, batch, config, train_config)
    curve = ckpt.loss_curve()
    assert list(curve.columns) == ["epoch", "train_loss", "val_loss", "best"]
    assert curve["train_loss"].iloc[-1] < 0.1 * curve["train_loss"].iloc[0]


def test_fit_loss_decreases_over_first_epochs():
    windows = _batch(16, seed=5)
    # full-batch, noise-free steps: every epoch is one deterministic Adam update
    train_config = TrainConfig(
        lr=1e-3, batch_size=16, micro_batch=16, max_epochs=5, patience=10, seed=1
    )
    curve = fit(windows, windows, MODEL, train_config).loss_curve()
    assert len(curve) == 5
    assert (np.diff(curve["train_loss"]) < 0).all()
    assert (np.diff(curve["val_loss"]) < 0).all()
    # validation runs after the epoch's update
    assert (curve["val_loss"] < curve["train_loss"]).all()


def test_checkpoint_round_trip(tmp_path: Path):
    ckpt = fit(_batch(6), _batch(4, seed=1), MODEL, replace(TRAIN, max_epochs=2), config_hash="abc")
    path = tmp_path / "checkpoint.npz"
    ckpt.save(path)

    loaded = Checkpoint.load(path)
    assert loaded.params.checksum() == ckpt.params.checksum()
    assert loaded.last_params.checksum() == ckpt.last_params.checksum()
    assert loaded.model_config == MODEL
    assert loaded.train_config == ckpt.train_config
    assert loaded.config_hash == "abc"
    assert loaded.moments.step == ckpt.moments.step
    assert loaded.best_loss == ckpt.best_loss
    assert loaded.history == ckpt.history
    for name, value in ckpt.moments.m.items():
        np.testing.assert_array_equal(loaded.moments.m[name], value)


def _rewrite(src: Path, dst: Path, **changes):
    with np.load(src, allow_pickle=False) as archive:
        data = {key: archive[key] for key in archive.files}
    data.update(changes)
    with dst.open("wb") as f:
        np.savez(f, **data)


def test_checkpoint_integrity(tmp_path: Path):
    ckpt = fit(_batch(6), None, MODEL, replace(TRAIN, max_epochs=1))
    path = tmp_path / "checkpoint.npz"
    ckpt.save(path)

    tampered = tmp_path / "tampered.npz"
    _rewrite(path, tampered, **{"best/theta": np.array(1.0)})
    with pytest.raises(DataError, match="checksum"):
        Checkpoint.load(tampered)

    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(str(archive["meta"]))
    meta["format_version"] = 99
    old = tmp_path / "old.npz"
    _rewrite(path, old, meta=np.array(json.dumps(meta)))
    with pytest.raises(DataError, match="format version"):
        Checkpoint.load(old)

    with pytest.raises(FileNotFoundError):
        Checkpoint.load(tmp_path / "missing.npz")


if __name__ == "__main__":
    pytest.main([__file__])
