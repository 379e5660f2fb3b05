"""
Feedback Attention Ladder CNN (FAL-CNN) patch classifier.

A VGG-style feedforward path classifies 56x56 mini-patches. After a first
pass, the class activation map of the predicted class is sent down a mirrored
feedback path (a conv at the deepest grid, then one 2x2 transposed conv per
pooling step). The channel mean at each feedback stage is a raw saliency map;
min-max normalised to [0, 1] it gates the matching feedforward stage as
f * (1 + A) in the next pass. Logits come from the last pass.

With all feedback weights at zero every raw map is constant, every attention
map is zero and the gated pass reproduces the ungated one exactly.
"""

import copy
import logging
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd
from tqdm import tqdm

import layers
from dataset import MITOTIC
from errors import CheckpointError, ConfigError, DatasetError, ShapeError
from schedule import lr_at_epoch, settings_from_dict

logger = logging.getLogger(__name__)

INFERENCE_CHUNK = 256


@dataclass(frozen=True)
class FalcnnConfig:
    input_size: int = 56
    widths: tuple = (16, 32, 64)
    num_classes: int = 2
    feedback_cycles: int = 1
    feedback_channels: int = 8
    augment_flips: bool = True

    def validate(self):
        if len(self.widths) != 3 or any(w <= 0 for w in self.widths):
            raise ConfigError(f"FAL-CNN needs three positive stage widths (two poolings), got {self.widths}")
        if self.input_size % 4:
            raise ConfigError(f"FAL-CNN input_size must be divisible by 4, got {self.input_size}")
        if self.num_classes != 2:
            raise ConfigError("FAL-CNN is a two-class (mitotic / non-mitotic) classifier")
        if self.feedback_cycles < 1 or self.feedback_channels < 1:
            raise ConfigError("feedback_cycles and feedback_channels must be >= 1")
        return self

    @property
    def attention_size(self):
        return self.input_size // 2 ** (len(self.widths) - 1)

    @classmethod
    def from_dict(cls, data):
        return settings_from_dict(cls, data).validate()


@dataclass
class FalcnnOutput:
    p_mitosis: np.ndarray        # (N,)
    attention_maps: list         # per stage, (N, H_k, W_k) in [0, 1]; last is the deepest
    logits: np.ndarray           # (N, 2) from the final pass
    first_pass_logits: np.ndarray

    @property
    def attention(self):
        """Deepest (14x14 for 56x56 patches) attention maps."""
        return self.attention_maps[-1]


def normalize_attention(raw_map):
    """Min-max scale a map to [0, 1]; a constant map becomes all zeros."""
    raw_map = np.asarray(raw_map, dtype=np.float64)
    lo, hi = raw_map.min(), raw_map.max()
    if hi == lo:
        return np.zeros_like(raw_map)
    return (raw_map - lo) / (hi - lo)


def _normalize_forward(raw):
    n = raw.shape[0]
    flat = raw.reshape(n, -1)
    imin = flat.argmin(axis=1)
    imax = flat.argmax(axis=1)
    rows = np.arange(n)
    lo = flat[rows, imin]
    span = flat[rows, imax] - lo
    const = span == 0
    safe = np.where(const, 1, span)
    out = np.where(const[:, None], 0, (flat - lo[:, None]) / safe[:, None])
    return out.reshape(raw.shape).astype(raw.dtype), (imin, imax, safe, const, out)


def _normalize_backward(dout, cache):
    imin, imax, span, const, y = cache
    n = dout.shape[0]
    d = dout.reshape(n, -1)
    rows = np.arange(n)
    s1 = d.sum(axis=1)
    s2 = (d * y).sum(axis=1)
    dv = d / span[:, None]
    dv[rows, imin] += (s2 - s1) / span
    dv[rows, imax] -= s2 / span
    dv[const] = 0
    return dv.reshape(dout.shape)


def falcnn_loss(logits, labels, return_grad=False):
    """Mean two-class cross-entropy of softmax(logits)."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1, 2)
    labels = np.asarray(labels).reshape(-1)
    logp = layers.log_softmax(logits)
    rows = np.arange(len(labels))
    loss = float(-logp[rows, labels].mean())
    if not return_grad:
        return loss
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return loss, grad / len(labels)


class FalCnn:
    def __init__(self, config, params):
        self.config = config.validate()
        self.params = params

    @classmethod
    def initialize(cls, config, seed=0, dtype=np.float32, zero_feedback=False):
        config.validate()
        rng = np.random.default_rng(seed)
        params = {}
        in_ch = 3
        for k, width in enumerate(config.widths):
            params[f"stage.{k}.w"], params[f"stage.{k}.b"] = layers.conv_params(rng, in_ch, width, dtype=dtype)
            in_ch = width
        params["fc.w"] = layers.he_normal(rng, (in_ch, config.num_classes), in_ch, dtype)
        params["fc.b"] = np.zeros(config.num_classes, dtype=dtype)

        fb = config.feedback_channels
        params["fb.top.w"], params["fb.top.b"] = layers.conv_params(rng, 1, fb, dtype=dtype)
        for k in range(len(config.widths) - 2, -1, -1):
            params[f"fb.{k}.w"] = layers.he_normal(rng, (fb, fb, 2, 2), fb, dtype)
            params[f"fb.{k}.b"] = np.zeros(fb, dtype=dtype)
        model = cls(config, params)
        if zero_feedback:
            model.zero_feedback()
        return model

    def zero_feedback(self):
        for name, value in self.params.items():
            if name.startswith("fb."):
                value[...] = 0

    @property
    def dtype(self):
        return self.params["stage.0.w"].dtype

    @property
    def num_stages(self):
        return len(self.config.widths)

    # -- feedforward pass -------------------------------------------------------

    def _pass(self, x, gates):
        p = self.params
        h = x
        stages = []
        g = None
        for k in range(self.num_stages):
            z, c_conv = layers.conv2d_forward(h, p[f"stage.{k}.w"], p[f"stage.{k}.b"])
            f, c_relu = layers.relu_forward(z)
            g = f if gates is None else f * (1 + gates[k][:, None])
            c_pool = None
            if k < self.num_stages - 1:
                h, c_pool = layers.maxpool2x2_forward(g)
            stages.append((c_conv, c_relu, f, c_pool))
        pooled, c_gap = layers.global_avgpool_forward(g)
        logits, c_fc = layers.linear_forward(pooled, p["fc.w"], p["fc.b"])
        return logits, g, (stages, c_gap, c_fc, gates)

    def _pass_backward(self, cache, dlogits, dg_last, grads):
        stages, c_gap, c_fc, gates = cache
        dg = None
        if dlogits is not None:
            dpooled, dw, db = layers.linear_backward(dlogits, c_fc)
            grads["fc.w"] += dw
            grads["fc.b"] += db
            dg = layers.global_avgpool_backward(dpooled, c_gap)
        if dg_last is not None:
            dg = dg_last if dg is None else dg + dg_last

        dgates = [None] * self.num_stages
        dh = None
        for k in range(self.num_stages - 1, -1, -1):
            c_conv, c_relu, f, c_pool = stages[k]
            if k < self.num_stages - 1:
                dg = layers.maxpool2x2_backward(dh, c_pool)
            if gates is not None:
                dgates[k] = (dg * f).sum(axis=1)
                df = dg * (1 + gates[k][:, None])
            else:
                df = dg
            dz = layers.relu_backward(df, c_relu)
            dh, dw, db = layers.conv2d_backward(dz, c_conv)
            grads[f"stage.{k}.w"] += dw
            grads[f"stage.{k}.b"] += db
        return dgates

    # -- feedback path ------------------------------------------------------------

    def _feedback(self, logits, g_last):
        p = self.params
        predicted = logits.argmax(axis=1)
        class_w = p["fc.w"][:, predicted].T                  # (N, C)
        cam = np.einsum("nc,nchw->nhw", class_w, g_last)

        e, c_top = layers.conv2d_forward(cam[:, None], p["fb.top.w"], p["fb.top.b"])
        e, c_relu = layers.relu_forward(e)
        chain = {self.num_stages - 1: (None, c_relu)}
        raws = {self.num_stages - 1: e.mean(axis=1)}
        for k in range(self.num_stages - 2, -1, -1):
            e, c_t = layers.conv_transpose2x2_forward(e, p[f"fb.{k}.w"], p[f"fb.{k}.b"])
            e, c_relu = layers.relu_forward(e)
            chain[k] = (c_t, c_relu)
            raws[k] = e.mean(axis=1)

        gates, norm_caches = [], []
        for k in range(self.num_stages):
            a, c_norm = _normalize_forward(raws[k])
            gates.append(a)
            norm_caches.append(c_norm)
        return gates, (predicted, class_w, g_last, c_top, chain, norm_caches)

    def _feedback_backward(self, dgates, cache, grads):
        p = self.params
        predicted, class_w, g_last, c_top, chain, norm_caches = cache
        fb = self.config.feedback_channels

        de = None
        for k in range(self.num_stages):
            draw = _normalize_backward(dgates[k], norm_caches[k])
            d_mean = np.broadcast_to(draw[:, None] / fb, draw.shape[:1] + (fb,) + draw.shape[1:])
            de = d_mean if de is None else de + d_mean
            c_t, c_relu = chain[k]
            de = layers.relu_backward(de, c_relu)
            if k < self.num_stages - 1:
                de, dw, db = layers.conv_transpose2x2_backward(de, c_t)
                grads[f"fb.{k}.w"] += dw
                grads[f"fb.{k}.b"] += db

        dcam, dw, db = layers.conv2d_backward(de, c_top)
        grads["fb.top.w"] += dw
        grads["fb.top.b"] += db
        dcam = dcam[:, 0]

        dg_last = class_w[:, :, None, None] * dcam[:, None]
        dclass_w = np.einsum("nhw,nchw->nc", dcam, g_last)
        np.add.at(grads["fc.w"].T, predicted, dclass_w)
        return dg_last

    # -- full model -----------------------------------------------------------------

    def forward(self, x):
        """
        Args:
            x: (N, 3, S, S) patches

        Returns:
            tuple: (FalcnnOutput, cache for ``backward``)
        """
        s = self.config.input_size
        if x.ndim != 4 or x.shape[1:] != (3, s, s):
            raise ShapeError(f"FAL-CNN expects (N, 3, {s}, {s}) patches, got {x.shape}")
        logits, g_last, pass_cache = self._pass(x, None)
        first_logits = logits
        passes = [pass_cache]
        feedbacks = []
        gates = None
        for _ in range(self.config.feedback_cycles):
            gates, fb_cache = self._feedback(logits, g_last)
            logits, g_last, pass_cache = self._pass(x, gates)
            feedbacks.append(fb_cache)
            passes.append(pass_cache)

        probs = layers.softmax(logits.astype(np.float64))
        out = FalcnnOutput(probs[:, MITOTIC], gates, logits, first_logits)
        return out, (passes, feedbacks)

    def backward(self, dlogits, cache):
        """Gradients of all parameters given d loss / d final logits."""
        passes, feedbacks = cache
        grads = layers.zero_grads(self.params)
        dlogits = dlogits.astype(self.dtype)
        dg_last = None
        for cycle in range(len(feedbacks), 0, -1):
            dgates = self._pass_backward(passes[cycle], dlogits, dg_last, grads)
            dlogits = None
            dg_last = self._feedback_backward(dgates, feedbacks[cycle - 1], grads)
        self._pass_backward(passes[0], dlogits, dg_last, grads)
        return grads

    def classify(self, patches):
        """
        Run the classifier on (N, 56, 56, 3) pixel patches in chunks.

        Returns:
            FalcnnOutput
        """
        x = np.asarray(patches).transpose(0, 3, 1, 2)
        return self.classify_nchw(x)

    def classify_nchw(self, x):
        x = np.ascontiguousarray(x, dtype=self.dtype)
        outs = [self.forward(x[i:i + INFERENCE_CHUNK])[0] for i in range(0, len(x), INFERENCE_CHUNK)]
        if not outs:
            sizes = [self.config.input_size // 2 ** k for k in range(self.num_stages)]
            return FalcnnOutput(np.zeros(0), [np.zeros((0, s, s)) for s in sizes],
                                np.zeros((0, 2)), np.zeros((0, 2)))
        return FalcnnOutput(
            np.concatenate([o.p_mitosis for o in outs]),
            [np.concatenate([o.attention_maps[k] for o in outs]) for k in range(self.num_stages)],
            np.concatenate([o.logits for o in outs]),
            np.concatenate([o.first_pass_logits for o in outs]),
        )

    # -- persistence ---------------------------------------------------------------------

    def save(self, directory, **meta):
        layers.save_weights(directory, self.params, {"kind": "classifier", "config": asdict(self.config), **meta})

    @classmethod
    def load(cls, directory):
        params, meta = layers.load_weights(directory)
        if meta.get("kind") != "classifier":
            raise CheckpointError(f"{directory} holds a {meta.get('kind')!r} checkpoint, expected 'classifier'")
        return cls(FalcnnConfig.from_dict(meta["config"]), params), meta


def falcnn_forward(patch, model):
    """Classify one (56, 56, 3) patch."""
    s = model.config.input_size
    if np.shape(patch) != (s, s, 3):
        raise ShapeError(f"FAL-CNN expects a {s}x{s}x3 patch, got {np.shape(patch)}")
    return model.classify(np.asarray(patch)[None])


def accuracy(model, patchset):
    if len(patchset) == 0:
        return 0.0
    x, y = patchset.arrays()
    out = model.classify_nchw(x)
    return float(np.mean(out.logits.argmax(axis=1) == y))


def train_classifier(train, validation, test, config, schedule, seed=0, dtype=np.float32):
    """
    Minimise cross-entropy over balanced mini-patches with SGD + momentum.

    The parameters with the best validation accuracy are kept and scored on
    the test split.

    Returns:
        tuple: (FalCnn, history DataFrame, info dict)
    """
    if len(train) == 0:
        raise DatasetError("cannot train the classifier on an empty patch set")
    model = FalCnn.initialize(config, seed, dtype)
    opt = layers.SgdMomentum(model.params, schedule.momentum, schedule.weight_decay, schedule.clip_norm)
    rng = np.random.default_rng(seed)
    x_all, y_all = train.arrays(dtype)

    history = []
    best = {"epoch": -1, "validation_accuracy": -1.0}
    best_params = copy.deepcopy(model.params)
    for epoch in tqdm(range(schedule.epochs), desc="classifier", unit="epoch"):
        lr = lr_at_epoch(schedule.lr, epoch)
        order = rng.permutation(len(x_all))
        total, batches = 0.0, 0
        for start in range(0, len(order), schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            x = x_all[idx]
            if config.augment_flips:
                flip_h = rng.random(len(idx)) < 0.5
                flip_v = rng.random(len(idx)) < 0.5
                x = x.copy()
                x[flip_h] = x[flip_h][:, :, :, ::-1]
                x[flip_v] = x[flip_v][:, :, ::-1, :]
            out, cache = model.forward(np.ascontiguousarray(x))
            loss, dlogits = falcnn_loss(out.logits, y_all[idx], return_grad=True)
            grads = model.backward(dlogits, cache)
            opt.step(model.params, grads, lr)
            total += loss
            batches += 1

        val_acc = accuracy(model, validation)
        row = {"epoch": epoch, "lr": lr, "loss": total / max(batches, 1), "validation_accuracy": val_acc}
        history.append(row)
        logger.info("classifier epoch %d lr=%.3g loss=%.4f val_acc=%.4f", epoch, lr, row["loss"], val_acc)
        if val_acc > best["validation_accuracy"]:
            best = {"epoch": epoch, "validation_accuracy": val_acc}
            best_params = copy.deepcopy(model.params)

    model.params = best_params
    best["test_accuracy"] = accuracy(model, test)
    logger.info("classifier best epoch %d, test accuracy %.4f", best["epoch"], best["test_accuracy"])
    return model, pd.DataFrame(history), best
