"""
Reduced-width FCOS: an anchor-free, fully convolutional one-stage detector.

Every location of every pyramid level predicts class logits, a centerness
logit and four distances (left, top, right, bottom) from the location to the
box edges. Scores are sqrt(sigmoid(class) * sigmoid(centerness)).
"""

import copy
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd
from tqdm import tqdm

import layers
from dataset import MITOTIC
from errors import CheckpointError, ConfigError, DatasetError, ShapeError, TrainingError
from evaluation import evaluate_dataset
from geometry import Box, Detection, clamp_box, nms
from schedule import lr_at_epoch, settings_from_dict

logger = logging.getLogger(__name__)

BOX_LOGIT_CLIP = 10.0


@dataclass(frozen=True)
class DetectorConfig:
    input_size: int = 224
    strides: tuple = (8, 16)
    channels: tuple = (16, 32, 64)
    num_classes: int = 1
    score_threshold: float = 0.3
    nms_iou: float = 0.5
    # (low, high) of max(l, t, r, b) per level; None means unbounded
    size_ranges: tuple = ((0.0, 64.0), (64.0, None))
    pre_nms_top_n: int = 1000
    prior_prob: float = 0.01
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    gt_box_size: float = 50.0

    def validate(self):
        if not self.channels or any(c <= 0 for c in self.channels):
            raise ConfigError(f"detector channels must be positive, got {self.channels}")
        base = 2 ** len(self.channels)
        expected = tuple(base * 2 ** k for k in range(len(self.strides)))
        if not self.strides or tuple(self.strides) != expected:
            raise ConfigError(
                f"strides {self.strides} do not match {len(self.channels)} pooled stages; expected {expected}")
        if any(self.input_size % s for s in self.strides):
            raise ConfigError(f"strides {self.strides} must divide input_size {self.input_size}")
        if len(self.size_ranges) != len(self.strides):
            raise ConfigError("size_ranges needs one (low, high) pair per pyramid level")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if not 0.0 <= self.nms_iou <= 1.0 or not 0.0 <= self.score_threshold <= 1.0:
            raise ConfigError("score_threshold and nms_iou must lie in [0, 1]")
        return self

    @classmethod
    def from_dict(cls, data):
        return settings_from_dict(cls, data).validate()


@dataclass
class LevelMaps:
    stride: int
    cls_logits: np.ndarray   # (N, K, H, W)
    ctr_logits: np.ndarray   # (N, H, W)
    box: np.ndarray          # (N, 4, H, W) l, t, r, b distances in pixels

    @property
    def grid(self):
        return self.ctr_logits.shape[1:]


@dataclass
class DetectorOutputMaps:
    levels: list

    def select(self, index):
        """Maps of a single image, keeping a batch dimension of one."""
        return DetectorOutputMaps([
            LevelMaps(lv.stride, lv.cls_logits[index:index + 1], lv.ctr_logits[index:index + 1],
                      lv.box[index:index + 1])
            for lv in self.levels
        ])


@dataclass
class LossTerms:
    total: float
    classification: float
    regression: float
    centerness: float
    num_positives: int


def location_centers(stride, height, width):
    """Image-space centres stride * (index + 0.5) of a level's grid cells."""
    ys = stride * (np.arange(height, dtype=np.float64) + 0.5)
    xs = stride * (np.arange(width, dtype=np.float64) + 0.5)
    return xs, ys


class FcosDetector:
    """Backbone, extra pyramid levels and a head shared across levels."""

    def __init__(self, config, params):
        self.config = config.validate()
        self.params = params

    @classmethod
    def initialize(cls, config, seed=0, dtype=np.float32):
        config.validate()
        rng = np.random.default_rng(seed)
        params = {}
        in_ch = 3
        for k, out_ch in enumerate(config.channels):
            params[f"backbone.{k}.w"], params[f"backbone.{k}.b"] = layers.conv_params(rng, in_ch, out_ch, dtype=dtype)
            in_ch = out_ch
        for j in range(1, len(config.strides)):
            params[f"extra.{j}.w"], params[f"extra.{j}.b"] = layers.conv_params(rng, in_ch, in_ch, dtype=dtype)
        params["head.tower.w"], params["head.tower.b"] = layers.conv_params(rng, in_ch, in_ch, dtype=dtype)
        for name, out_ch in (("cls", config.num_classes), ("ctr", 1), ("box", 4)):
            w = (rng.standard_normal((out_ch, in_ch, 3, 3)) * 0.01).astype(dtype)
            params[f"head.{name}.w"], params[f"head.{name}.b"] = w, np.zeros(out_ch, dtype=dtype)
        params["head.cls.b"][:] = -math.log((1.0 - config.prior_prob) / config.prior_prob)
        return cls(config, params)

    @property
    def dtype(self):
        return self.params["backbone.0.w"].dtype

    # -- forward / backward ---------------------------------------------------

    def forward(self, x):
        """
        Args:
            x: (N, 3, S, S) images with S == config.input_size

        Returns:
            tuple: (DetectorOutputMaps, cache for ``backward``)
        """
        cfg, p = self.config, self.params
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (cfg.input_size, cfg.input_size):
            raise ShapeError(f"detector expects (N, 3, {cfg.input_size}, {cfg.input_size}) input, got {x.shape}")

        h = x
        stem = []
        for k in range(len(cfg.channels)):
            z, c_conv = layers.conv2d_forward(h, p[f"backbone.{k}.w"], p[f"backbone.{k}.b"])
            a, c_relu = layers.relu_forward(z)
            h, c_pool = layers.maxpool2x2_forward(a)
            stem.append((c_conv, c_relu, c_pool))
        feats = [h]
        extra = []
        for j in range(1, len(cfg.strides)):
            z, c_conv = layers.conv2d_forward(h, p[f"extra.{j}.w"], p[f"extra.{j}.b"], stride=2)
            h, c_relu = layers.relu_forward(z)
            extra.append((c_conv, c_relu))
            feats.append(h)

        levels, heads = [], []
        for stride, f in zip(cfg.strides, feats):
            t, c_tower = layers.conv2d_forward(f, p["head.tower.w"], p["head.tower.b"])
            ta, c_trelu = layers.relu_forward(t)
            cls, c_cls = layers.conv2d_forward(ta, p["head.cls.w"], p["head.cls.b"])
            ctr, c_ctr = layers.conv2d_forward(ta, p["head.ctr.w"], p["head.ctr.b"])
            raw, c_box = layers.conv2d_forward(ta, p["head.box.w"], p["head.box.b"])
            dist = np.exp(np.clip(raw, -BOX_LOGIT_CLIP, BOX_LOGIT_CLIP)) * stride
            levels.append(LevelMaps(stride, cls, ctr[:, 0], dist))
            heads.append((c_tower, c_trelu, c_cls, c_ctr, c_box, raw, dist))
        return DetectorOutputMaps(levels), (stem, extra, heads)

    def backward(self, dmaps, cache):
        """
        Backpropagate gradients with respect to the output maps.

        Args:
            dmaps: per level (d_cls_logits, d_ctr_logits, d_box_distances)
            cache: from ``forward``

        Returns:
            dict of parameter gradients
        """
        cfg, p = self.config, self.params
        stem, extra, heads = cache
        grads = layers.zero_grads(p)

        def acc(prefix, dw, db):
            grads[f"{prefix}.w"] += dw
            grads[f"{prefix}.b"] += db

        dfeats = []
        for (dcls, dctr, dbox), (c_tower, c_trelu, c_cls, c_ctr, c_box, raw, dist) in zip(dmaps, heads):
            inside = (raw > -BOX_LOGIT_CLIP) & (raw < BOX_LOGIT_CLIP)
            draw = dbox * dist * inside
            dta, dw, db = layers.conv2d_backward(dcls, c_cls)
            acc("head.cls", dw, db)
            d, dw, db = layers.conv2d_backward(dctr[:, None], c_ctr)
            acc("head.ctr", dw, db)
            dta = dta + d
            d, dw, db = layers.conv2d_backward(draw, c_box)
            acc("head.box", dw, db)
            dta = dta + d
            dt = layers.relu_backward(dta, c_trelu)
            df, dw, db = layers.conv2d_backward(dt, c_tower)
            acc("head.tower", dw, db)
            dfeats.append(df)

        dh = dfeats[-1]
        for j in range(len(cfg.strides) - 1, 0, -1):
            c_conv, c_relu = extra[j - 1]
            dz = layers.relu_backward(dh, c_relu)
            dprev, dw, db = layers.conv2d_backward(dz, c_conv)
            acc(f"extra.{j}", dw, db)
            dh = dprev + dfeats[j - 1]

        for k in range(len(cfg.channels) - 1, -1, -1):
            c_conv, c_relu, c_pool = stem[k]
            da = layers.maxpool2x2_backward(dh, c_pool)
            dz = layers.relu_backward(da, c_relu)
            dh, dw, db = layers.conv2d_backward(dz, c_conv)
            acc(f"backbone.{k}", dw, db)
        return grads

    # -- inference --------------------------------------------------------------

    def to_input(self, pixels):
        return np.ascontiguousarray(pixels.transpose(2, 0, 1)[None]).astype(self.dtype)

    def detect(self, pixels):
        """Decoded detections for one (S, S, 3) pixel array."""
        maps = detector_forward(pixels, self)
        return decode_detections(maps, self.config)

    def predict(self, image):
        return self.detect(image.pixels)

    # -- persistence ------------------------------------------------------------

    def save(self, directory, **meta):
        layers.save_weights(directory, self.params, {"kind": "detector", "config": asdict(self.config), **meta})

    @classmethod
    def load(cls, directory):
        params, meta = layers.load_weights(directory)
        if meta.get("kind") != "detector":
            raise CheckpointError(f"{directory} holds a {meta.get('kind')!r} checkpoint, expected 'detector'")
        return cls(DetectorConfig.from_dict(meta["config"]), params), meta


def detector_forward(image, detector):
    """
    Output maps for one (S, S, 3) image.

    Returns:
        DetectorOutputMaps with a batch dimension of one
    """
    s = detector.config.input_size
    if image.shape != (s, s, 3):
        raise ShapeError(f"detector expects a {s}x{s}x3 image, got {image.shape}")
    maps, _ = detector.forward(detector.to_input(image))
    return maps


def decode_detections(maps, config, index=0):
    """
    Turn output maps into scored, clamped, NMS-filtered detections.

    Args:
        maps: DetectorOutputMaps
        config: DetectorConfig
        index: which image of the batch to decode

    Returns:
        list of Detection sorted by descending score
    """
    size = config.input_size
    dets = []
    for lv in maps.levels:
        cls = lv.cls_logits[index].astype(np.float64)
        ctr = lv.ctr_logits[index].astype(np.float64)
        box = lv.box[index].astype(np.float64)
        scores = np.sqrt(layers.sigmoid(cls) * layers.sigmoid(ctr)[None])
        h, w = ctr.shape
        xs, ys = location_centers(lv.stride, h, w)
        for k in range(scores.shape[0]):
            flat = scores[k].ravel()
            keep = np.flatnonzero(flat >= config.score_threshold)
            if keep.size > config.pre_nms_top_n:
                keep = keep[np.argsort(-flat[keep], kind="stable")[:config.pre_nms_top_n]]
            for idx in keep:
                i, j = divmod(int(idx), w)
                left, top, right, bottom = box[:, i, j]
                cx, cy = xs[j], ys[i]
                b = clamp_box(Box(cx - left, cy - top, cx + right, cy + bottom), size, size)
                dets.append(Detection(b, k, float(min(flat[idx], 1.0))))
    return nms(dets, config.nms_iou)


# ---------------------------------------------------------------------------
# targets and losses
# ---------------------------------------------------------------------------

@dataclass
class LevelTargets:
    labels: np.ndarray     # (N, K, H, W) one-hot
    positive: np.ndarray   # (N, H, W) bool
    reg: np.ndarray        # (N, 4, H, W) target l, t, r, b
    ctr: np.ndarray        # (N, H, W) centerness target


def centerness_target(reg):
    """sqrt(min(l, r) / max(l, r) * min(t, b) / max(t, b)) over a leading axis of 4."""
    left, top, right, bottom = reg
    lr = np.minimum(left, right) / np.maximum(np.maximum(left, right), 1e-12)
    tb = np.minimum(top, bottom) / np.maximum(np.maximum(top, bottom), 1e-12)
    return np.sqrt(np.clip(lr * tb, 0.0, None))


def assign_targets(maps, gt_boxes, config, gt_classes=None):
    """
    FCOS positive assignment.

    A location is positive for a box if it lies strictly inside it and the
    largest of its four distances falls in the level's size range; when
    several boxes qualify the smallest one wins.

    Args:
        maps: DetectorOutputMaps (only shapes are used)
        gt_boxes: per image, a list of Box
        gt_classes: per image, a list of class ids (default all 0)

    Returns:
        list of LevelTargets, one per level
    """
    n = maps.levels[0].ctr_logits.shape[0]
    if len(gt_boxes) != n:
        raise ShapeError(f"got ground truth for {len(gt_boxes)} images, maps hold {n}")
    targets = []
    for lv, (lo, hi) in zip(maps.levels, config.size_ranges):
        h, w = lv.grid
        k = lv.cls_logits.shape[1]
        labels = np.zeros((n, k, h, w))
        positive = np.zeros((n, h, w), dtype=bool)
        reg = np.ones((n, 4, h, w))
        xs, ys = location_centers(lv.stride, h, w)
        px = np.tile(xs, h)
        py = np.repeat(ys, w)
        for b, boxes in enumerate(gt_boxes):
            if not boxes:
                continue
            arr = np.array([bx.as_array() for bx in boxes])
            classes = np.zeros(len(boxes), dtype=np.int64) if gt_classes is None else np.asarray(gt_classes[b])
            dist = np.stack([
                px[:, None] - arr[None, :, 0],
                py[:, None] - arr[None, :, 1],
                arr[None, :, 2] - px[:, None],
                arr[None, :, 3] - py[:, None],
            ])                                           # (4, H*W, G)
            inside = dist.min(axis=0) > 0
            reach = dist.max(axis=0)
            in_range = reach >= lo
            if hi is not None:
                in_range &= reach <= hi
            area = (arr[:, 2] - arr[:, 0]) * (arr[:, 3] - arr[:, 1])
            cand = np.where(inside & in_range, area[None, :], np.inf)
            best = cand.argmin(axis=1)
            pos = np.isfinite(cand[np.arange(cand.shape[0]), best])
            loc = np.flatnonzero(pos)
            positive[b].ravel()[loc] = True
            chosen = best[loc]
            reg_b = reg[b].reshape(4, -1)
            reg_b[:, loc] = dist[:, loc, chosen]
            lab_b = labels[b].reshape(k, -1)
            lab_b[classes[chosen], loc] = 1.0
        ctr = centerness_target(np.moveaxis(reg, 1, 0))
        targets.append(LevelTargets(labels, positive, reg, ctr))
    return targets


def _focal(x, t, alpha, gamma):
    p = layers.sigmoid(x)
    lp = layers.log_sigmoid(x)
    lq = layers.log_sigmoid(-x)
    loss = -(t * alpha * (1 - p) ** gamma * lp + (1 - t) * (1 - alpha) * p ** gamma * lq)
    grad = (t * alpha * (1 - p) ** gamma * (gamma * p * lp - (1 - p))
            + (1 - t) * (1 - alpha) * p ** gamma * (p - gamma * (1 - p) * lq))
    return loss, grad


def _iou_loss(pred, target):
    """-log IoU of distance-encoded boxes sharing a location; pred, target (4, P)."""
    pl, pt, pr, pb = pred
    gl, gt, gr, gb = target
    area_p = (pl + pr) * (pt + pb)
    area_g = (gl + gr) * (gt + gb)
    wi = np.minimum(pl, gl) + np.minimum(pr, gr)
    hi = np.minimum(pt, gt) + np.minimum(pb, gb)
    inter = wi * hi
    union = area_p + area_g - inter
    loss = np.log(union) - np.log(inter)

    di = np.stack([hi * (pl < gl), wi * (pt < gt), hi * (pr < gr), wi * (pb < gb)])
    du = np.stack([pt + pb, pl + pr, pt + pb, pl + pr]) - di
    grad = du / union - di / inter
    return loss, grad


def detector_loss(maps, gt_boxes, config, return_grad=False):
    """
    Focal classification loss over all locations plus IoU and centerness
    losses over positive locations, each normalised by the positive count.

    Returns:
        LossTerms, or (LossTerms, per-level map gradients) with ``return_grad``
    """
    targets = assign_targets(maps, gt_boxes, config)
    num_pos = int(sum(t.positive.sum() for t in targets))
    norm = float(max(num_pos, 1))

    cls_total = reg_total = ctr_total = 0.0
    dmaps = []
    for lv, tg in zip(maps.levels, targets):
        x = lv.cls_logits.astype(np.float64)
        loss, grad = _focal(x, tg.labels, config.focal_alpha, config.focal_gamma)
        cls_total += loss.sum() / norm
        dcls = grad / norm

        dctr = np.zeros(lv.ctr_logits.shape)
        dbox = np.zeros(lv.box.shape)
        mask = tg.positive
        if mask.any():
            pred = np.moveaxis(lv.box.astype(np.float64), 1, 0)[:, mask]
            target = np.moveaxis(tg.reg, 1, 0)[:, mask]
            loss, grad = _iou_loss(pred, target)
            reg_total += loss.sum() / norm
            dbox_t = np.moveaxis(dbox, 1, 0)
            dbox_t[:, mask] = grad / norm

            c = lv.ctr_logits.astype(np.float64)[mask]
            ct = tg.ctr[mask]
            ctr_total += (-(ct * layers.log_sigmoid(c) + (1 - ct) * layers.log_sigmoid(-c))).sum() / norm
            dctr[mask] = (layers.sigmoid(c) - ct) / norm
        dtype = lv.cls_logits.dtype
        dmaps.append((dcls.astype(dtype), dctr.astype(dtype), dbox.astype(dtype)))

    total = cls_total + reg_total + ctr_total
    terms = LossTerms(float(total), float(cls_total), float(reg_total), float(ctr_total), num_pos)
    if not all(math.isfinite(v) for v in (terms.total, terms.classification, terms.regression, terms.centerness)):
        raise TrainingError(f"non-finite detector loss: {terms}")
    return (terms, dmaps) if return_grad else terms


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def gt_boxes_for(dataset, config):
    return [dataset.gt_boxes(image, config.gt_box_size) for image in dataset.images]


def train_detector(train_set, val_set, config, schedule, seed=0, radius_px=30.0, dtype=np.float32):
    """
    Fit the detector with SGD + momentum under the step-decay schedule.

    The parameters with the best validation F1 are kept.

    Returns:
        tuple: (FcosDetector, history DataFrame, best-epoch info dict)
    """
    if len(train_set) == 0:
        raise DatasetError("cannot train the detector on an empty dataset")
    if not any(a.label == MITOTIC for a in train_set.annotations):
        raise TrainingError("training set has no mitotic annotations; the detector has nothing to learn")
    config.validate()

    detector = FcosDetector.initialize(config, seed, dtype)
    boxes = gt_boxes_for(train_set, config)
    opt = layers.SgdMomentum(detector.params, schedule.momentum, schedule.weight_decay, schedule.clip_norm)
    rng = np.random.default_rng(seed)
    n = len(train_set)

    history = []
    best = {"epoch": -1, "validation_f1": -1.0}
    best_params = copy.deepcopy(detector.params)
    for epoch in tqdm(range(schedule.epochs), desc="detector", unit="epoch"):
        lr = lr_at_epoch(schedule.lr, epoch)
        sums = np.zeros(4)
        batches = 0
        order = rng.permutation(n)
        for start in range(0, n, schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            x = np.stack([train_set.images[i].pixels.transpose(2, 0, 1) for i in idx]).astype(dtype)
            maps, cache = detector.forward(x)
            try:
                terms, dmaps = detector_loss(maps, [boxes[i] for i in idx], config, return_grad=True)
            except TrainingError as e:
                raise TrainingError(f"epoch {epoch}, step {batches}: {e}") from e
            grads = detector.backward(dmaps, cache)
            opt.step(detector.params, grads, lr)
            sums += (terms.total, terms.classification, terms.regression, terms.centerness)
            batches += 1

        val_f1 = evaluate_dataset(detector, val_set, radius_px, name="detector").f1 if len(val_set) else 0.0
        mean = sums / max(batches, 1)
        row = {"epoch": epoch, "lr": lr, "loss": mean[0], "loss_cls": mean[1], "loss_reg": mean[2],
               "loss_ctr": mean[3], "validation_f1": val_f1}
        history.append(row)
        logger.info("detector epoch %d lr=%.3g loss=%.4f (cls %.4f reg %.4f ctr %.4f) val_f1=%.4f",
                    epoch, lr, *mean, val_f1)
        if val_f1 > best["validation_f1"]:
            best = {"epoch": epoch, "validation_f1": val_f1}
            best_params = copy.deepcopy(detector.params)

    detector.params = best_params
    return detector, pd.DataFrame(history), best
