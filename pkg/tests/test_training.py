import csv
import math
import os
from unittest import mock

import numpy as np
import pytest

from vitlab import autodiff as ad
from vitlab.autodiff import Tensor
from vitlab.common import ConfigError, PatchSpec, TrainingDivergedError, ViTConfig
from vitlab.data import (
    AugmentationPolicy,
    DatasetBundle,
    Split,
    augment_batch,
    generate_synthetic_texture,
)
from vitlab.model import VisionTransformer
from vitlab.training import (
    AdamW,
    EpochLog,
    OptimizerState,
    TrainConfig,
    adamw_step,
    clip_grad_norm,
    cross_entropy,
    evaluate_loss,
    fit,
    lr_at_epoch,
    write_training_log,
)

SLOW = pytest.mark.skipif(
    not os.environ.get("VITLAB_SLOW_TESTS"),
    reason="VITLAB_SLOW_TESTS environment variable is not set",
)


def _tiny_model(seed=0):
    config = ViTConfig(L=1, d=8, h=2, num_classes=2, patch=PatchSpec(p=14))
    return VisionTransformer(config, seed=seed)


def _tiny_bundle(seed=0):
    rng = np.random.default_rng(seed)
    splits = {
        name: Split(
            rng.random((n, 28, 28, 3)).astype(np.float32),
            np.arange(n, dtype=np.int64) % 2,
        )
        for name, n in (("train", 10), ("val", 4), ("test", 4))
    }
    return DatasetBundle("toy", 2, splits, num_classes=2)


def test_uniform_logits_give_log_k():
    loss = cross_entropy(Tensor(np.zeros((3, 4))), np.array([0, 1, 3]))
    assert loss.item() == pytest.approx(math.log(4), abs=1e-6)


def test_confident_correct_logit_drives_loss_to_zero():
    logits = np.array([[60.0, 0.0], [0.0, 60.0]])
    assert cross_entropy(Tensor(logits), np.array([0, 1])).item() < 1e-20


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(0)
    labels = np.array([2, 0, 1, 2, 4])
    with ad.precision(np.float64):
        logits = Tensor(rng.normal(size=(5, 5)), requires_grad=True)
        cross_entropy(logits, labels).backward()
    probs = np.exp(logits.data) / np.exp(logits.data).sum(axis=1, keepdims=True)
    probs[np.arange(5), labels] -= 1.0
    np.testing.assert_allclose(logits.grad, probs / 5, atol=1e-6)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError, match="Label 4"):
        cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 4]))


def test_adamw_first_step():
    cfg = TrainConfig(lr=0.1, weight_decay=0.0)
    updated, state = adamw_step(
        {"w": np.array([1.0])}, {"w": np.array([1.0])}, OptimizerState(), cfg
    )
    assert updated["w"][0] == pytest.approx(0.9, abs=1e-7)
    assert state.t == 1
    assert state.m["w"][0] == pytest.approx(0.1)
    assert state.v["w"][0] == pytest.approx(0.001)


def test_adamw_zero_gradient_keeps_parameters():
    cfg = TrainConfig(lr=0.1, weight_decay=0.0)
    theta = np.array([0.5, -2.0])
    updated, _ = adamw_step({"w": theta}, {"w": np.zeros(2)}, OptimizerState(), cfg)
    np.testing.assert_array_equal(updated["w"], theta)


def test_adamw_decay_is_decoupled():
    cfg = TrainConfig(lr=0.1, weight_decay=0.2)
    theta = np.array([0.5, -2.0])
    updated, state = adamw_step({"w": theta}, {"w": None}, OptimizerState(), cfg)
    np.testing.assert_allclose(updated["w"], theta * (1 - 0.1 * 0.2))
    assert not state.m["w"].any()


def test_adamw_update_magnitude_approaches_lr():
    cfg = TrainConfig(lr=0.01, weight_decay=0.0)
    theta, state = {"w": np.array([3.0])}, OptimizerState()
    for _ in range(100):
        before = theta["w"][0]
        theta, state = adamw_step(theta, {"w": np.array([0.3])}, state, cfg)
    assert before - theta["w"][0] == pytest.approx(0.01, rel=0.01)
    assert state.t == 100
    assert (state.v["w"] >= 0).all()


def test_adamw_optimizer_updates_tensors_in_place():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    w.grad = np.array([1.0, -1.0])
    AdamW({"w": w}, TrainConfig(lr=0.1, weight_decay=0.0)).step(0.1)
    np.testing.assert_allclose(w.data, [0.9, 2.1], atol=1e-6)


def test_clip_grad_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    total = np.sqrt(np.sum(a.grad**2) + np.sum(b.grad**2))
    assert total == pytest.approx(1.0, abs=1e-5)
    assert clip_grad_norm([a, b], 10.0) == pytest.approx(total)


@pytest.mark.parametrize(
    "epoch, lr", [(0, 1e-4), (24, 1e-4), (25, 5e-5), (50, 2.5e-5), (75, 1.25e-5), (79, 1.25e-5)]
)
def test_lr_schedule(epoch, lr):
    assert lr_at_epoch(epoch, TrainConfig()) == pytest.approx(lr, rel=1e-12)


def test_lr_schedule_is_piecewise_constant():
    cfg = TrainConfig()
    rates = [lr_at_epoch(e, cfg) for e in range(cfg.epochs)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))
    breaks = [e for e in range(1, cfg.epochs) if rates[e] != rates[e - 1]]
    assert breaks == [25, 50, 75]


def test_lr_schedule_rejects_epoch_outside_run():
    with pytest.raises(ConfigError):
        lr_at_epoch(80, TrainConfig())


def test_train_config_from_dict():
    cfg = TrainConfig.from_dict({"lr": 0.001, "epochs": 5})
    assert (cfg.lr, cfg.epochs, cfg.lr_period) == (0.001, 5, 25)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError, match="momentum"):
        TrainConfig.from_dict({"momentum": 0.9})
    with pytest.raises(ConfigError):
        TrainConfig(precision="float16")
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)


def test_fit_logs_every_epoch_and_keeps_best():
    cfg = TrainConfig(lr=1e-3, epochs=4, batch_size=4)
    model = _tiny_model()
    bundle = _tiny_bundle()
    reporter = mock.Mock()
    result = fit(model, bundle, cfg, reporter=reporter)

    assert [row.epoch for row in result.log] == [0, 1, 2, 3]
    val_losses = [row.val_loss for row in result.log]
    assert result.best_val_loss == min(val_losses)
    assert result.best_epoch == val_losses.index(min(val_losses))
    assert result.best_val_loss <= val_losses[-1]
    assert reporter.call_count == 4
    args, kwargs = reporter.call_args
    assert args == ("progress",)
    assert (kwargs["name"], kwargs["current"], kwargs["total"]) == ("epochs", 4, 4)
    assert kwargs["postfix"]["val"] == val_losses[-1]
    assert kwargs["postfix"]["train"] == result.log[-1].train_loss

    best = VisionTransformer.from_checkpoint(result.checkpoint)
    assert evaluate_loss(best, bundle["val"], 4) == pytest.approx(result.best_val_loss, rel=1e-6)


def test_fit_is_reproducible():
    cfg = TrainConfig(lr=1e-3, epochs=2, batch_size=3, seed=5)
    first = fit(_tiny_model(), _tiny_bundle(), cfg)
    second = fit(_tiny_model(), _tiny_bundle(), cfg)
    assert first.log == second.log
    for name in first.checkpoint.names():
        assert first.checkpoint[name].tobytes() == second.checkpoint[name].tobytes()


def test_fit_keeps_earlier_epoch_on_ties():
    cfg = TrainConfig(epochs=4, batch_size=5)
    with mock.patch("vitlab.training.evaluate_loss", side_effect=[0.5, 0.4, 0.4, 0.6]):
        result = fit(_tiny_model(), _tiny_bundle(), cfg, AugmentationPolicy.disabled())
    assert result.best_epoch == 1
    assert result.best_val_loss == 0.4


def test_fit_aborts_on_nan_loss():
    model = _tiny_model()
    model.params["head.bias"].data[:] = np.nan
    with pytest.raises(TrainingDivergedError, match="epoch 0, batch 0"):
        fit(model, _tiny_bundle(), TrainConfig(epochs=2, batch_size=4))
    ad.Tape.current().reset()


def test_only_training_batches_are_augmented():
    bundle = _tiny_bundle()
    train = bundle["train"]
    originals = {name: split.images.copy() for name, split in bundle.splits.items()}
    cfg = TrainConfig(lr=1e-3, epochs=2, batch_size=4)
    spy = mock.patch("vitlab.training.augment_batch", wraps=augment_batch)
    with spy as augmented, mock.patch(
        "vitlab.training.evaluate_loss", wraps=evaluate_loss
    ) as evaluated:
        fit(_tiny_model(), bundle, cfg, policy=AugmentationPolicy())

    assert sum(len(call.args[1]) for call in augmented.call_args_list) == 2 * len(train)
    for call in augmented.call_args_list:
        images, indices = call.args[:2]
        np.testing.assert_array_equal(images, train.images[indices])
    assert all(call.args[1] is bundle["val"] for call in evaluated.call_args_list)
    for name, images in originals.items():
        np.testing.assert_array_equal(bundle[name].images, images)


def test_training_log_csv(tmp_path):
    rows = [EpochLog(0, 0.75, 0.5, 1e-4), EpochLog(1, 0.25, 0.125, 5e-5)]
    path = write_training_log(rows, tmp_path / "log.csv")
    raw = path.read_bytes()
    assert b"\r\n" not in raw
    with open(path, newline="") as f:
        parsed = list(csv.reader(f))
    assert parsed[0] == ["epoch", "train_loss", "val_loss", "lr"]
    assert parsed[1] == ["0", "0.750000", "0.500000", "0.0001"]
    assert len(parsed) == 3


@SLOW
def test_vit_micro_overfits_small_subset():
    bundle = generate_synthetic_texture(46, seed=0)
    assert len(bundle["train"]) == 64
    model = VisionTransformer(ViTConfig.vit_micro(PatchSpec(p=4), num_classes=2), seed=0)
    cfg = TrainConfig(lr=1e-3, epochs=200, lr_period=100, batch_size=16, weight_decay=0.0)
    fit(model, bundle, cfg, AugmentationPolicy.disabled())
    train = bundle["train"]
    accuracy = (model.predict_proba(train.images).argmax(axis=1) == train.labels).mean()
    assert accuracy >= 0.99
