"""
Numpy neural-network building blocks.

Each layer is a pair of functions: ``*_forward`` returns the output and a
cache, ``*_backward`` consumes the upstream gradient and that cache. The
functional form lets a network run the same weights several times in one
step (the FAL-CNN feedforward passes) and still accumulate exact gradients.

Tensors are laid out NCHW. Every function keeps the dtype of its inputs, so
float64 parameters give float64 gradients for finite-difference checks.
"""

import hashlib
import json
import logging
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, log_expit

from errors import CheckpointError

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------

def he_normal(rng, shape, fan_in, dtype=np.float32):
    """He-normal initialisation for ReLU networks."""
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


def conv_params(rng, in_channels, out_channels, kernel=3, dtype=np.float32):
    w = he_normal(rng, (out_channels, in_channels, kernel, kernel), in_channels * kernel * kernel, dtype)
    b = np.zeros(out_channels, dtype=dtype)
    return w, b


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d_forward(x, w, b, stride=1):
    """
    Square convolution with zero padding of kernel//2.

    Args:
        x: (N, C, H, W) input
        w: (F, C, k, k) filters
        b: (F,) bias
        stride: 1 or 2

    Returns:
        tuple: ((N, F, Ho, Wo) output, cache)
    """
    n, c, h, width = x.shape
    f, _, kh, kw = w.shape
    pad = kh // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = cols @ w.reshape(f, -1).T + b
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))
    return out, (x.shape, cols, w, stride, ho, wo)


def conv2d_backward(dout, cache):
    x_shape, cols, w, stride, ho, wo = cache
    n, c, h, width = x_shape
    f, _, kh, kw = w.shape
    pad = kh // 2

    dflat = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (dflat.T @ cols).reshape(w.shape)
    db = dflat.sum(axis=0)

    dcols = (dflat @ w.reshape(f, -1)).reshape(n, ho, wo, c, kh, kw)
    dxp = np.zeros((n, c, h + 2 * pad, width + 2 * pad), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad:pad + h, pad:pad + width]
    return dx, dw, db


def conv_transpose2x2_forward(x, w, b):
    """
    Stride-2 transposed convolution with a 2x2 kernel (non-overlapping).

    Args:
        x: (N, C, H, W) input
        w: (C, F, 2, 2) filters
        b: (F,) bias

    Returns:
        tuple: ((N, F, 2H, 2W) output, cache)
    """
    n, _, h, width = x.shape
    f = w.shape[1]
    out = np.einsum("ncij,cfab->nfiajb", x, w).reshape(n, f, 2 * h, 2 * width)
    out = out + b[None, :, None, None]
    return out, (x, w)


def conv_transpose2x2_backward(dout, cache):
    x, w = cache
    n, _, h, width = x.shape
    f = w.shape[1]
    dr = dout.reshape(n, f, h, 2, width, 2)
    dx = np.einsum("nfiajb,cfab->ncij", dr, w)
    dw = np.einsum("ncij,nfiajb->cfab", x, dr)
    db = dout.sum(axis=(0, 2, 3))
    return dx, dw, db


# ---------------------------------------------------------------------------
# pooling, activations, dense
# ---------------------------------------------------------------------------

def maxpool2x2_forward(x):
    n, c, h, width = x.shape
    if h % 2 or width % 2:
        raise ValueError(f"max pooling needs even spatial dims, got {h}x{width}")
    xr = x.reshape(n, c, h // 2, 2, width // 2, 2)
    flat = xr.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, width // 2, 4)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool2x2_backward(dout, cache):
    shape, idx = cache
    n, c, h, width = shape
    dflat = np.zeros((n, c, h // 2, width // 2, 4), dtype=dout.dtype)
    np.put_along_axis(dflat, idx[..., None], dout[..., None], axis=-1)
    return dflat.reshape(n, c, h // 2, width // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, width)


def relu_forward(x):
    return np.maximum(x, 0), x


def relu_backward(dout, x):
    return dout * (x > 0)


def linear_forward(x, w, b):
    """Dense layer y = x @ w + b with w of shape (in, out)."""
    return x @ w + b, (x, w)


def linear_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def global_avgpool_forward(x):
    return x.mean(axis=(2, 3)), x.shape


def global_avgpool_backward(dout, shape):
    n, c, h, width = shape
    return np.broadcast_to(dout[:, :, None, None] / (h * width), shape).copy()


def sigmoid(x):
    return expit(x)


def log_sigmoid(x):
    return log_expit(x)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

class SgdMomentum:
    """
    Stochastic gradient descent with classical momentum.

    Only the parameters handed to the constructor are ever updated; anything
    listed in ``frozen`` is skipped even if a gradient is supplied.
    """

    def __init__(self, params, momentum=0.9, weight_decay=0.0, clip_norm=None, frozen=()):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.frozen = set(frozen)
        self.velocity = {name: np.zeros_like(value) for name, value in params.items()}

    def step(self, params, grads, lr):
        """
        Apply one update in place.

        Returns:
            float: global gradient norm before clipping
        """
        names = [n for n in grads if n in self.velocity and n not in self.frozen]
        norm = float(np.sqrt(sum(float(np.sum(np.square(grads[n], dtype=np.float64))) for n in names)))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        for name in names:
            g = grads[name] * scale
            if self.weight_decay:
                g = g + self.weight_decay * params[name]
            v = self.velocity[name]
            v *= self.momentum
            v -= lr * g
            params[name] += v
        return norm


def zero_grads(params):
    return {name: np.zeros_like(value) for name, value in params.items()}


# ---------------------------------------------------------------------------
# parameter persistence and hashing
# ---------------------------------------------------------------------------

def params_digest(params):
    """SHA-256 over parameter names, dtypes, shapes and raw bytes."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        h.update(name.encode("utf-8"))
        h.update(str(arr.dtype).encode("ascii"))
        h.update(repr(arr.shape).encode("ascii"))
        h.update(arr.tobytes())
    return h.hexdigest()


def save_weights(directory, params, meta):
    """
    Write ``weights.npz`` plus a ``meta.json`` sidecar into ``directory``.
    """
    os.makedirs(directory, exist_ok=True)
    np.savez(os.path.join(directory, "weights.npz"), **params)
    with open(os.path.join(directory, "meta.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    logger.debug("saved %d arrays to %s", len(params), directory)


def load_weights(directory):
    """
    Read a checkpoint written by ``save_weights``.

    Returns:
        tuple: (params dict, meta dict)
    """
    weights_path = os.path.join(directory, "weights.npz")
    meta_path = os.path.join(directory, "meta.json")
    for path in (weights_path, meta_path):
        if not os.path.exists(path):
            raise CheckpointError(f"missing checkpoint file {path}")
    try:
        with np.load(weights_path, allow_pickle=False) as data:
            params = {name: data[name].copy() for name in data.files}
    except Exception as e:
        raise CheckpointError(f"corrupt weights file {weights_path}: {e}") from e
    try:
        with open(meta_path, encoding="utf-8") as f:
            meta = json.load(f)
    except (OSError, ValueError) as e:
        raise CheckpointError(f"corrupt checkpoint sidecar {meta_path}: {e}") from e
    return params, meta


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def numerical_gradient(loss_fn, params, names=None, eps=1e-6):
    """
    Central finite differences of ``loss_fn()`` with respect to ``params``.

    ``loss_fn`` must read the arrays in ``params`` each time it is called;
    entries are perturbed in place and restored afterwards.
    """
    grads = {}
    for name in names or sorted(params):
        arr = params[name]
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = loss_fn()
            flat[i] = orig - eps
            minus = loss_fn()
            flat[i] = orig
            gflat[i] = (plus - minus) / (2.0 * eps)
        grads[name] = g
    return grads


def relative_error(analytic, numeric):
    """Norm-wise relative error between two gradient dicts (or arrays)."""
    if isinstance(analytic, dict):
        keys = sorted(numeric)
        a = np.concatenate([np.ravel(analytic[k]) for k in keys])
        b = np.concatenate([np.ravel(numeric[k]) for k in keys])
    else:
        a, b = np.ravel(analytic), np.ravel(numeric)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
