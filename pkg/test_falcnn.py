import math

import numpy as np
import numpy.testing as npt
import pytest

import layers
from dataset import PatchSet, SplitSpec, build_balanced_patchset, split_patchset
from errors import CheckpointError, ConfigError, DatasetError, ShapeError
from falcnn import (FalCnn, FalcnnConfig, accuracy, falcnn_forward, falcnn_loss, normalize_attention,
                    train_classifier)
from schedule import LrSchedule, StageSchedule

SMALL = FalcnnConfig(widths=(4, 6, 8), feedback_channels=3)


def test_normalize_attention_examples():
    npt.assert_allclose(normalize_attention([[1, 2], [3, 5]]), [[0, 0.25], [0.5, 1]])
    npt.assert_array_equal(normalize_attention(np.full((3, 3), 7.0)), np.zeros((3, 3)))


@pytest.mark.parametrize("kwargs", [
    {"widths": (4, 8)},
    {"input_size": 54},
    {"num_classes": 3},
    {"feedback_cycles": 0},
])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        FalcnnConfig(**kwargs).validate()


def test_attention_size():
    assert FalcnnConfig().attention_size == 14


def test_zero_feedback_reproduces_plain_pass(rng):
    model = FalCnn.initialize(SMALL, seed=0, zero_feedback=True)
    out = model.classify(rng.random((5, 56, 56, 3)))
    npt.assert_array_equal(out.logits, out.first_pass_logits)
    for a in out.attention_maps:
        assert not a.any()


def test_outputs_are_well_formed(rng):
    model = FalCnn.initialize(SMALL, seed=1)
    out = model.classify(rng.random((7, 56, 56, 3)))
    assert out.attention.shape == (7, 14, 14)
    assert [a.shape[1:] for a in out.attention_maps] == [(56, 56), (28, 28), (14, 14)]
    for a in out.attention_maps:
        assert a.min() >= 0.0 and a.max() <= 1.0
    probs = layers.softmax(out.logits.astype(np.float64))
    npt.assert_allclose(probs.sum(axis=1), 1.0)
    npt.assert_allclose(out.p_mitosis, probs[:, 0])


def test_single_patch_forward(rng):
    model = FalCnn.initialize(SMALL, seed=1)
    patch = rng.random((56, 56, 3))
    single = falcnn_forward(patch, model)
    batch = model.classify(np.stack([patch, patch]))
    npt.assert_allclose(single.p_mitosis[0], batch.p_mitosis[0], rtol=1e-5)
    with pytest.raises(ShapeError):
        falcnn_forward(np.zeros((28, 28, 3)), model)
    with pytest.raises(ShapeError):
        model.forward(np.zeros((1, 56, 56, 3)))


def test_empty_batch(rng):
    out = FalCnn.initialize(SMALL, seed=1).classify(np.zeros((0, 56, 56, 3)))
    assert out.p_mitosis.shape == (0,)
    assert out.attention.shape == (0, 14, 14)


def test_loss_at_zero_logits():
    assert falcnn_loss(np.zeros((4, 2)), [0, 1, 1, 0]) == pytest.approx(math.log(2))
    loss, grad = falcnn_loss(np.array([[2.0, -1.0]]), [0], return_grad=True)
    assert loss == pytest.approx(math.log(1 + math.exp(-3)))
    npt.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-12)


@pytest.mark.parametrize("cycles", [1, 2])
def test_gradient_through_feedback(rng, cycles):
    config = FalcnnConfig(input_size=16, widths=(2, 3, 4), feedback_channels=2, feedback_cycles=cycles)
    model = FalCnn.initialize(config, seed=5, dtype=np.float64)
    # zero biases leave zero-padded activations on the ReLU kink
    for name in model.params:
        if name.endswith(".b"):
            model.params[name][...] = rng.uniform(0.05, 0.2, model.params[name].shape)
    x = rng.random((3, 3, 16, 16))
    labels = np.array([0, 1, 0])

    def loss():
        return falcnn_loss(model.forward(x)[0].logits, labels)

    out, cache = model.forward(x)
    assert not np.array_equal(out.logits, out.first_pass_logits)
    _, dlogits = falcnn_loss(out.logits, labels, return_grad=True)
    grads = model.backward(dlogits, cache)
    numeric = layers.numerical_gradient(loss, model.params)
    assert layers.relative_error(grads, numeric) < 1e-5


def test_save_and_load(tmp_path, rng):
    model = FalCnn.initialize(SMALL, seed=2)
    model.save(tmp_path, seed=2)
    loaded, meta = FalCnn.load(tmp_path)
    assert loaded.config == SMALL and meta["kind"] == "classifier"
    patches = rng.random((2, 56, 56, 3))
    npt.assert_array_equal(loaded.classify(patches).logits, model.classify(patches).logits)
    layers.save_weights(tmp_path, model.params, {"kind": "detector"})
    with pytest.raises(CheckpointError):
        FalCnn.load(tmp_path)


def test_short_training_run(small_dataset):
    patches = build_balanced_patchset(small_dataset.images, small_dataset.annotations, seed=0)
    train, test, val = split_patchset(patches, SplitSpec(seed=0))
    schedule = StageSchedule(epochs=2, lr=LrSchedule(1e-2), batch_size=4)
    model, history, best = train_classifier(train, val, test, SMALL, schedule, seed=0)
    assert list(history.columns) == ["epoch", "lr", "loss", "validation_accuracy"]
    assert np.isfinite(history["loss"]).all()
    assert best["validation_accuracy"] == history["validation_accuracy"].max()
    assert 0.0 <= best["test_accuracy"] <= 1.0
    assert best["test_accuracy"] == accuracy(model, test)


def test_training_needs_patches():
    with pytest.raises(DatasetError):
        train_classifier(PatchSet([]), PatchSet([]), PatchSet([]), SMALL, StageSchedule(epochs=1))
    assert accuracy(FalCnn.initialize(SMALL), PatchSet([])) == 0.0
