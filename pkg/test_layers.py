import json
import os

import numpy as np
import numpy.testing as npt
import pytest

import layers
from errors import CheckpointError


def check_layer(forward, backward, inputs, rng, tol=1e-6):
    """Compare a layer's backward pass with central differences of sum(out * r)."""
    out, cache = forward(**inputs)
    r = rng.standard_normal(out.shape)
    analytic = backward(r, cache)

    def loss():
        return float(np.sum(forward(**inputs)[0] * r))

    numeric = layers.numerical_gradient(loss, inputs)
    for name, grad in zip(inputs, analytic):
        assert layers.relative_error(grad, numeric[name]) < tol, name


@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_gradients(rng, stride):
    inputs = {"x": rng.standard_normal((2, 3, 6, 6)), "w": rng.standard_normal((4, 3, 3, 3)),
              "b": rng.standard_normal(4)}
    check_layer(lambda x, w, b: layers.conv2d_forward(x, w, b, stride), layers.conv2d_backward, inputs, rng)


def test_conv2d_output_shape(rng):
    x = rng.standard_normal((1, 3, 8, 8))
    w, b = layers.conv_params(rng, 3, 5, dtype=np.float64)
    assert layers.conv2d_forward(x, w, b)[0].shape == (1, 5, 8, 8)
    assert layers.conv2d_forward(x, w, b, stride=2)[0].shape == (1, 5, 4, 4)


def test_conv_transpose_gradients_and_shape(rng):
    inputs = {"x": rng.standard_normal((2, 3, 4, 4)), "w": rng.standard_normal((3, 2, 2, 2)),
              "b": rng.standard_normal(2)}
    out, _ = layers.conv_transpose2x2_forward(**inputs)
    assert out.shape == (2, 2, 8, 8)
    check_layer(layers.conv_transpose2x2_forward, layers.conv_transpose2x2_backward, inputs, rng)


def test_maxpool_gradient(rng):
    x = rng.permutation(2 * 3 * 6 * 6).reshape(2, 3, 6, 6).astype(np.float64) / 10.0
    check_layer(layers.maxpool2x2_forward, lambda d, c: (layers.maxpool2x2_backward(d, c),), {"x": x}, rng)


def test_maxpool_picks_window_maximum():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    out, _ = layers.maxpool2x2_forward(x)
    npt.assert_array_equal(out[0, 0], [[5, 7], [13, 15]])


def test_linear_and_gap_gradients(rng):
    inputs = {"x": rng.standard_normal((5, 4)), "w": rng.standard_normal((4, 3)), "b": rng.standard_normal(3)}
    check_layer(layers.linear_forward, layers.linear_backward, inputs, rng)
    check_layer(layers.global_avgpool_forward, lambda d, shape: (layers.global_avgpool_backward(d, shape),),
                {"x": rng.standard_normal((2, 3, 4, 4))}, rng)


def test_softmax_rows_sum_to_one(rng):
    p = layers.softmax(rng.standard_normal((10, 2)) * 50)
    npt.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    npt.assert_allclose(layers.log_softmax(np.zeros((1, 2))), np.log(0.5) * np.ones((1, 2)))


def test_sgd_skips_frozen_parameters():
    params = {"a": np.ones(3), "b": np.ones(3)}
    opt = layers.SgdMomentum(params, momentum=0.9, frozen=["b"])
    opt.step(params, {"a": np.ones(3), "b": np.ones(3)}, lr=0.1)
    npt.assert_allclose(params["a"], 0.9)
    npt.assert_array_equal(params["b"], 1.0)


def test_sgd_clips_global_norm():
    params = {"a": np.zeros(2)}
    opt = layers.SgdMomentum(params, momentum=0.0, clip_norm=1.0)
    norm = opt.step(params, {"a": np.array([3.0, 4.0])}, lr=1.0)
    assert norm == pytest.approx(5.0)
    npt.assert_allclose(params["a"], [-0.6, -0.8])


def test_params_digest_tracks_bytes():
    params = {"w": np.arange(4, dtype=np.float32)}
    before = layers.params_digest(params)
    assert layers.params_digest({"w": params["w"].copy()}) == before
    params["w"][0] = np.nextafter(np.float32(0), np.float32(1))
    assert layers.params_digest(params) != before


def test_weights_round_trip(tmp_path, rng):
    params = {"w": rng.standard_normal((2, 3)).astype(np.float32)}
    layers.save_weights(tmp_path, params, {"kind": "test", "seed": 5})
    loaded, meta = layers.load_weights(tmp_path)
    npt.assert_array_equal(loaded["w"], params["w"])
    assert loaded["w"].dtype == np.float32
    assert meta == {"kind": "test", "seed": 5}


def test_load_weights_errors(tmp_path):
    with pytest.raises(CheckpointError):
        layers.load_weights(tmp_path / "missing")
    layers.save_weights(tmp_path, {"w": np.zeros(1)}, {})
    with open(os.path.join(tmp_path, "meta.json"), "w") as f:
        f.write("{not json")
    with pytest.raises(CheckpointError):
        layers.load_weights(tmp_path)
    with open(os.path.join(tmp_path, "meta.json"), "w") as f:
        json.dump({}, f)
    with open(os.path.join(tmp_path, "weights.npz"), "wb") as f:
        f.write(b"garbage")
    with pytest.raises(CheckpointError):
        layers.load_weights(tmp_path)
