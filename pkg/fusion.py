"""
Fusion network: merges one detector box with the classifier's view of it.

Per detection the 203-element input is

    [x1/W, y1/H, x2/W, y2/H, class_id, score, p_mitosis, a(0,0) ... a(13,13)]

and three fully connected layers (48, 12, 3 outputs, ReLU between) emit raw
(u, v, w). These become a centre shift dx = tanh(u) * 28, dy = tanh(v) * 28
and a score multiplier m = 2 * sigmoid(w). With the last layer at zero every
detection passes through unchanged.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

import layers
from errors import CheckpointError, ShapeError, TrainingError
from evaluation import match_detections
from geometry import Box, Detection, clamp_box, translate_box
from schedule import settings_from_dict

logger = logging.getLogger(__name__)

ATTENTION_SIZE = 14
HEADER_SIZE = 7
FUSION_INPUT_SIZE = HEADER_SIZE + ATTENTION_SIZE * ATTENTION_SIZE
FUSION_LAYERS = (48, 12, 3)
P_MITOSIS_INDEX = 6


@dataclass(frozen=True)
class FusionConfig:
    offset_range: float = 28.0
    loss_lambda: float = 1.0
    radius_px: float = 30.0
    bce_eps: float = 1e-7

    @classmethod
    def from_dict(cls, data):
        return settings_from_dict(cls, data)


@dataclass(frozen=True)
class Adjustment:
    dx: float
    dy: float
    multiplier: float

    @classmethod
    def from_raw(cls, raw, offset_range=28.0):
        u, v, w = (float(r) for r in raw)
        return cls(float(np.tanh(u)) * offset_range, float(np.tanh(v)) * offset_range,
                   2.0 * float(layers.sigmoid(w)))


def assemble_fusion_input(det, p_mitosis, attention, image_w, image_h):
    """
    Build the fusion input vector for a single detection.

    Returns:
        (203,) float64 array
    """
    attention = np.asarray(attention, dtype=np.float64)
    if attention.shape != (ATTENTION_SIZE, ATTENTION_SIZE):
        raise ShapeError(f"fusion expects a {ATTENTION_SIZE}x{ATTENTION_SIZE} attention map, got {attention.shape}")
    b = det.box
    header = [b.x1 / image_w, b.y1 / image_h, b.x2 / image_w, b.y2 / image_h,
              float(det.class_id), det.score, float(p_mitosis)]
    return np.concatenate([np.array(header, dtype=np.float64), attention.ravel()])


def assemble_fusion_batch(dets, p_mitosis, attention, image_w, image_h):
    """Stack ``assemble_fusion_input`` over detections; (N, 203)."""
    if not dets:
        return np.zeros((0, FUSION_INPUT_SIZE))
    return np.stack([assemble_fusion_input(d, p, a, image_w, image_h)
                     for d, p, a in zip(dets, p_mitosis, attention)])


class FusionNet:
    def __init__(self, params):
        self.params = params

    @classmethod
    def initialize(cls, seed=0, dtype=np.float32):
        """He-initialised hidden layers; the output layer starts at zero."""
        rng = np.random.default_rng(seed)
        params = {}
        fan_in = FUSION_INPUT_SIZE
        for k, width in enumerate(FUSION_LAYERS, start=1):
            if k < len(FUSION_LAYERS):
                params[f"fc{k}.w"] = layers.he_normal(rng, (fan_in, width), fan_in, dtype)
            else:
                params[f"fc{k}.w"] = np.zeros((fan_in, width), dtype=dtype)
            params[f"fc{k}.b"] = np.zeros(width, dtype=dtype)
            fan_in = width
        return cls(params)

    @property
    def dtype(self):
        return self.params["fc1.w"].dtype

    @property
    def num_parameters(self):
        return sum(v.size for v in self.params.values())

    def forward(self, x):
        """
        Args:
            x: (N, 203) fusion inputs

        Returns:
            tuple: ((N, 3) raw outputs, cache)
        """
        if x.ndim != 2 or x.shape[1] != FUSION_INPUT_SIZE:
            raise ShapeError(f"fusion expects (N, {FUSION_INPUT_SIZE}) inputs, got {x.shape}")
        h = x.astype(self.dtype)
        caches = []
        for k in range(1, len(FUSION_LAYERS) + 1):
            h, c_lin = layers.linear_forward(h, self.params[f"fc{k}.w"], self.params[f"fc{k}.b"])
            c_relu = None
            if k < len(FUSION_LAYERS):
                h, c_relu = layers.relu_forward(h)
            caches.append((c_lin, c_relu))
        return h, caches

    def backward(self, dout, caches):
        grads = {}
        d = dout.astype(self.dtype)
        for k in range(len(FUSION_LAYERS), 0, -1):
            c_lin, c_relu = caches[k - 1]
            if c_relu is not None:
                d = layers.relu_backward(d, c_relu)
            d, grads[f"fc{k}.w"], grads[f"fc{k}.b"] = layers.linear_backward(d, c_lin)
        return grads

    def save(self, directory, **meta):
        shapes = {name: list(v.shape) for name, v in self.params.items()}
        layers.save_weights(directory, self.params, {"kind": "fusion", "layer_shapes": shapes, **meta})

    @classmethod
    def load(cls, directory):
        params, meta = layers.load_weights(directory)
        if meta.get("kind") != "fusion":
            raise CheckpointError(f"{directory} holds a {meta.get('kind')!r} checkpoint, expected 'fusion'")
        expected = FusionNet.initialize().params
        for name, value in expected.items():
            if name not in params or params[name].shape != value.shape:
                raise CheckpointError(f"{directory}: fusion parameter {name} missing or misshapen")
        return cls(params), meta


def fusion_forward(fusion_input, net):
    """Raw (u, v, w) for one 203-element input."""
    x = np.asarray(fusion_input)
    if x.shape != (FUSION_INPUT_SIZE,):
        raise ShapeError(f"fusion input must have {FUSION_INPUT_SIZE} entries, got shape {x.shape}")
    out, _ = net.forward(x[None])
    return out[0]


def apply_adjustment(det, adj, image_w, image_h):
    """Shift the box centre, clamp it to the image and rescale the score."""
    box = clamp_box(translate_box(det.box, adj.dx, adj.dy), image_w, image_h)
    score = min(max(det.score * adj.multiplier, 0.0), 1.0)
    return Detection(box, det.class_id, score)


def fusion_loss(adjusted_dets, gt_points, radius_px=30.0, loss_lambda=1.0, eps=1e-7):
    """
    Score and placement loss of adjusted detections.

    Detections are matched greedily to ground-truth points. The loss is the
    mean binary cross-entropy between each adjusted score and its matched flag
    plus ``loss_lambda`` times the mean L1 centre error of matched pairs in
    units of ``radius_px``. No detections gives zero.
    """
    if not adjusted_dets:
        return 0.0
    res = match_detections(adjusted_dets, gt_points, radius_px)
    target = np.zeros(len(adjusted_dets))
    for i, _, _ in res.pairs:
        target[i] = 1.0
    p = np.clip([d.score for d in adjusted_dets], eps, 1 - eps)
    bce = float(-np.mean(target * np.log(p) + (1 - target) * np.log1p(-p)))
    if not res.pairs:
        return bce
    gt = np.asarray(gt_points, dtype=np.float64).reshape(-1, 2)
    l1 = [abs((adjusted_dets[i].box.x1 + adjusted_dets[i].box.x2) / 2 - gt[j, 0])
          + abs((adjusted_dets[i].box.y1 + adjusted_dets[i].box.y2) / 2 - gt[j, 1]) for i, j, _ in res.pairs]
    return bce + loss_lambda * float(np.mean(l1)) / radius_px


@dataclass
class FusionLossTerms:
    loss: float
    bce: float
    l1: float
    matched: int


def fusion_loss_and_grad(raw, boxes, scores, gt_points, image_w, image_h, config=FusionConfig()):
    """
    Loss of a batch of detections after adjustment, with d loss / d raw.

    Args:
        raw: (N, 3) fusion outputs
        boxes: (N, 4) detector boxes x1, y1, x2, y2
        scores: (N,) detector scores
        gt_points: (K, 2) mitotic points
        image_w, image_h: image size used for clamping

    Returns:
        tuple: (FusionLossTerms, (N, 3) gradient)
    """
    raw = np.asarray(raw, dtype=np.float64)
    n = len(raw)
    grad = np.zeros_like(raw)
    if n == 0:
        return FusionLossTerms(0.0, 0.0, 0.0, 0), grad
    boxes = np.asarray(boxes, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    r = config.offset_range

    tu, tv = np.tanh(raw[:, 0]), np.tanh(raw[:, 1])
    sig = layers.sigmoid(raw[:, 2])
    shift = np.stack([tu * r, tv * r, tu * r, tv * r], axis=1)
    moved = boxes + shift
    limit = np.array([image_w, image_h, image_w, image_h], dtype=np.float64)
    clamped = np.clip(moved, 0.0, limit)
    inside = (moved > 0.0) & (moved < limit)
    scaled = scores * 2.0 * sig
    adjusted = np.clip(scaled, 0.0, 1.0)

    cx = (clamped[:, 0] + clamped[:, 2]) / 2
    cy = (clamped[:, 1] + clamped[:, 3]) / 2
    gt = np.asarray(gt_points, dtype=np.float64).reshape(-1, 2)
    dets = [Detection(Box(*(float(v) for v in c)), 0, float(s)) for c, s in zip(clamped, adjusted)]
    res = match_detections(dets, gt, config.radius_px)
    target = np.zeros(n)
    for i, _, _ in res.pairs:
        target[i] = 1.0

    eps = config.bce_eps
    p = np.clip(adjusted, eps, 1 - eps)
    bce = float(-np.mean(target * np.log(p) + (1 - target) * np.log1p(-p)))
    live = (scaled > eps) & (scaled < 1 - eps)
    dscore = np.where(live, (p - target) / (p * (1 - p)) / n, 0.0)
    grad[:, 2] = dscore * scores * 2.0 * sig * (1 - sig)

    l1 = 0.0
    if res.pairs:
        idx = np.array([i for i, _, _ in res.pairs])
        gidx = np.array([j for _, j, _ in res.pairs])
        ex, ey = cx[idx] - gt[gidx, 0], cy[idx] - gt[gidx, 1]
        scale = config.loss_lambda / (len(idx) * config.radius_px)
        l1 = float(np.mean(np.abs(ex) + np.abs(ey))) / config.radius_px
        dcx = np.zeros(n)
        dcy = np.zeros(n)
        dcx[idx] = scale * np.sign(ex)
        dcy[idx] = scale * np.sign(ey)
        grad[:, 0] = dcx * 0.5 * (inside[:, 0].astype(float) + inside[:, 2]) * r * (1 - tu ** 2)
        grad[:, 1] = dcy * 0.5 * (inside[:, 1].astype(float) + inside[:, 3]) * r * (1 - tv ** 2)

    loss = bce + config.loss_lambda * l1
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite fusion loss (bce={bce}, l1={l1})")
    return FusionLossTerms(loss, bce, l1, len(res.pairs)), grad


def adjust_detections(dets, raw, image_w, image_h, offset_range=28.0):
    """Apply per-detection raw fusion outputs; order is preserved."""
    return [apply_adjustment(d, Adjustment.from_raw(r, offset_range), image_w, image_h) for d, r in zip(dets, raw)]
