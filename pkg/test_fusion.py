import math

import numpy as np
import numpy.testing as npt
import pytest

import layers
from errors import CheckpointError, ShapeError
from fusion import (FUSION_INPUT_SIZE, P_MITOSIS_INDEX, Adjustment, FusionConfig, FusionNet, adjust_detections,
                    apply_adjustment, assemble_fusion_batch, assemble_fusion_input, fusion_forward, fusion_loss,
                    fusion_loss_and_grad)
from geometry import Box, Detection, clamp_box


def det(cx, cy, score, size=40.0):
    return Detection(Box.from_center(cx, cy, size), 0, score)


def test_input_layout(rng):
    attention = rng.random((14, 14))
    x = assemble_fusion_input(Detection(Box(0, 0, 224, 224), 0, 0.8), 0.3, attention, 224, 224)
    assert x.shape == (FUSION_INPUT_SIZE,) == (203,)
    npt.assert_array_equal(x[:4], [0, 0, 1, 1])
    assert x[5] == 0.8
    assert x[P_MITOSIS_INDEX] == 0.3
    assert x[7 + 14 * 3 + 5] == attention[3, 5]

    half = assemble_fusion_input(Detection(Box(56, 28, 112, 84), 0, 0.5), 0.1, attention, 224, 112)
    npt.assert_allclose(half[:4], [0.25, 0.25, 0.5, 0.75])


def test_input_rejects_wrong_attention_size():
    with pytest.raises(ShapeError):
        assemble_fusion_input(det(50, 50, 0.5), 0.5, np.zeros((7, 7)), 224, 224)
    assert assemble_fusion_batch([], [], [], 224, 224).shape == (0, 203)


def test_network_shape_and_parameter_count():
    net = FusionNet.initialize(seed=0)
    assert net.num_parameters == 10419
    assert net.params["fc1.w"].shape == (203, 48)
    assert net.params["fc2.w"].shape == (48, 12)
    assert net.params["fc3.w"].shape == (12, 3)
    with pytest.raises(ShapeError):
        net.forward(np.zeros((2, 202)))
    with pytest.raises(ShapeError):
        fusion_forward(np.zeros((2, 203)), net)


def test_zero_parameters_give_zero_output(rng):
    net = FusionNet.initialize(seed=0)
    for value in net.params.values():
        value[...] = 0
    npt.assert_array_equal(fusion_forward(rng.random(203), net), np.zeros(3))


def test_initial_network_is_identity(rng):
    net = FusionNet.initialize(seed=4)
    dets = [det(60, 60, 0.7), det(30, 200, 0.35), Detection(Box(0, 0, 224, 224), 0, 1.0)]
    x = assemble_fusion_batch(dets, rng.random(3), rng.random((3, 14, 14)), 224, 224)
    raw, _ = net.forward(x)
    npt.assert_array_equal(raw, 0)
    assert adjust_detections(dets, raw, 224, 224) == dets


def test_adjustment_examples():
    sat = Adjustment.from_raw([50.0, -50.0, 0.0])
    assert (sat.dx, sat.dy, sat.multiplier) == (28.0, -28.0, 1.0)

    half = Adjustment.from_raw([0.0, 0.0, math.log(1 / 3)])
    assert half.multiplier == pytest.approx(0.5)
    assert apply_adjustment(det(100, 100, 0.6), half, 224, 224).score == pytest.approx(0.3)

    boosted = apply_adjustment(det(100, 100, 0.9), Adjustment(0.0, 0.0, 1.8), 224, 224)
    assert boosted.score == 1.0

    moved = apply_adjustment(det(10, 100, 0.5), Adjustment(-28.0, 5.0, 1.0), 224, 224)
    assert moved.box == Box(0, 85, 2, 125)


def test_adjusted_detections_stay_valid(rng):
    width, height = 224, 160
    for _ in range(50):
        dets = [Detection(clamp_box(Box.from_center(*rng.uniform(0, [width, height]), float(rng.uniform(1, 80))),
                                    width, height), 0, float(rng.random())) for _ in range(4)]
        raw = rng.normal(0, 5, (4, 3))
        for d in adjust_detections(dets, raw, width, height):
            assert 0.0 <= d.score <= 1.0
            assert 0 <= d.box.x1 <= d.box.x2 <= width
            assert 0 <= d.box.y1 <= d.box.y2 <= height


def test_outputs_follow_input_order(rng):
    net = FusionNet.initialize(seed=1)
    net.params["fc3.w"][...] = rng.standard_normal((12, 3))
    x = rng.random((6, 203))
    perm = rng.permutation(6)
    npt.assert_allclose(net.forward(x[perm])[0], net.forward(x)[0][perm], rtol=1e-6)


def test_loss_examples():
    assert fusion_loss([det(50, 50, 0.5)], np.zeros((0, 2))) == pytest.approx(math.log(2))
    assert fusion_loss([det(50, 50, 1.0)], [(50, 50)]) == pytest.approx(0.0, abs=1e-6)
    assert fusion_loss([], [(50, 50)]) == 0.0
    # a confident match 6 px off costs only the placement term, 2 * 6 / 30
    assert fusion_loss([det(56, 50, 1.0)], [(50, 50)], loss_lambda=2.0) == pytest.approx(0.4, abs=1e-6)


def loss_setup(rng):
    net = FusionNet.initialize(seed=7, dtype=np.float64)
    net.params["fc3.w"][...] = rng.standard_normal((12, 3)) * 0.01
    net.params["fc3.b"][...] = rng.standard_normal(3) * 0.02
    x = rng.random((3, 203))
    dets = [det(60, 60, 0.4), det(150, 80, 0.5), det(100, 180, 0.3)]
    boxes = np.array([d.box.as_array() for d in dets])
    scores = np.array([d.score for d in dets])
    gt = np.array([(65.0, 58.0), (148.0, 90.0)])
    return net, x, dets, boxes, scores, gt


def test_loss_gradient_matches_finite_differences(rng):
    net, x, _, boxes, scores, gt = loss_setup(rng)
    config = FusionConfig(loss_lambda=0.5)

    def loss():
        raw, _ = net.forward(x)
        return fusion_loss_and_grad(raw, boxes, scores, gt, 224, 224, config)[0].loss

    raw, caches = net.forward(x)
    terms, draw = fusion_loss_and_grad(raw, boxes, scores, gt, 224, 224, config)
    assert terms.matched == 2
    grads = net.backward(draw, caches)
    numeric = layers.numerical_gradient(loss, net.params, names=["fc1.b", "fc2.w", "fc2.b", "fc3.w", "fc3.b"])
    assert layers.relative_error(grads, numeric) < 1e-5


def test_loss_and_grad_agrees_with_loss(rng):
    net, x, dets, boxes, scores, gt = loss_setup(rng)
    raw, _ = net.forward(x)
    terms, _ = fusion_loss_and_grad(raw, boxes, scores, gt, 224, 224, FusionConfig())
    adjusted = adjust_detections(dets, raw, 224, 224)
    assert terms.loss == pytest.approx(fusion_loss(adjusted, gt), rel=1e-9)
    assert terms.loss == pytest.approx(terms.bce + terms.l1)

    empty, grad = fusion_loss_and_grad(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), gt, 224, 224)
    assert empty.loss == 0.0 and grad.shape == (0, 3)


def test_save_and_load(tmp_path, rng):
    net = FusionNet.initialize(seed=2)
    net.params["fc3.w"][...] = rng.standard_normal((12, 3))
    net.save(tmp_path, seed=2, radius=30.0)
    loaded, meta = FusionNet.load(tmp_path)
    assert meta["kind"] == "fusion" and meta["radius"] == 30.0
    assert meta["layer_shapes"]["fc1.w"] == [203, 48]
    for name, value in net.params.items():
        npt.assert_array_equal(loaded.params[name], value)


def test_load_rejects_bad_checkpoints(tmp_path):
    layers.save_weights(tmp_path / "kind", FusionNet.initialize().params, {"kind": "detector"})
    with pytest.raises(CheckpointError):
        FusionNet.load(tmp_path / "kind")
    params = FusionNet.initialize().params
    params["fc2.w"] = np.zeros((48, 10), dtype=np.float32)
    layers.save_weights(tmp_path / "shape", params, {"kind": "fusion"})
    with pytest.raises(CheckpointError):
        FusionNet.load(tmp_path / "shape")
