"""
Composite model: detector -> mini-patch classifier -> fusion.

Inference decodes detector boxes, crops a 56x56 mini-patch at every box
centre, classifies the batch of patches, and lets the fusion network shift
each box and rescale its score. ``CompositeModel.predict`` has the same
signature as ``FcosDetector.predict`` so either can be evaluated or served.

The fusion network is trained in situ with the detector and classifier
frozen; their parameter digests are checked before and after.
"""

import copy
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from tqdm import tqdm

import layers
from dataset import PATCH_SIZE, extract_patch
from detector import FcosDetector
from errors import CheckpointError, DatasetError, PrerequisiteError, TrainingError
from evaluation import f1_score, match_detections
from falcnn import FalCnn
from fusion import (FusionConfig, FusionNet, adjust_detections, assemble_fusion_batch,
                    fusion_loss_and_grad)
from geometry import center, detections_to_array, sort_detections
from schedule import lr_at_epoch

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STAGES = ("detector", "classifier", "fusion")


@dataclass
class CompositeModel:
    detector: FcosDetector
    classifier: FalCnn
    fusion: FusionNet
    fusion_config: FusionConfig = field(default_factory=FusionConfig)
    frozen_detector: bool = False
    frozen_classifier: bool = False
    frozen_digests: dict = field(default_factory=dict, repr=False)

    @property
    def score_threshold(self):
        return self.detector.config.score_threshold

    def freeze_upstream(self):
        """Mark detector and classifier frozen and record their parameter digests."""
        self.frozen_detector = self.frozen_classifier = True
        self.frozen_digests = upstream_digests(self)

    def verify_frozen(self):
        """
        Check every stage flagged as frozen against the digest recorded when it
        was frozen.

        Returns:
            dict: current upstream digests
        """
        current = upstream_digests(self)
        flags = {"detector": self.frozen_detector, "classifier": self.frozen_classifier}
        changed = [name for name, frozen in flags.items()
                   if frozen and current[name] != self.frozen_digests.get(name)]
        if changed:
            raise TrainingError(f"frozen parameters changed during fusion training: {', '.join(changed)}")
        return current

    def predict(self, image):
        return composite_infer(image, self)


@dataclass
class CompositeTrace:
    """Intermediate results of one composite inference."""

    raw_detections: list
    patches: np.ndarray
    p_mitosis: np.ndarray
    attention: np.ndarray
    fusion_inputs: np.ndarray
    raw_outputs: np.ndarray
    adjusted: list
    detections: list


def composite_trace(image, model):
    """Run every composite stage on one image and keep the intermediates."""
    raw = model.detector.predict(image)
    size = model.classifier.config.attention_size
    if not raw:
        return CompositeTrace([], np.zeros((0, PATCH_SIZE, PATCH_SIZE, 3)), np.zeros(0), np.zeros((0, size, size)),
                              np.zeros((0, 0)), np.zeros((0, 3)), [], [])

    patches = np.stack([extract_patch(image, center(d.box)).pixels for d in raw])
    out = model.classifier.classify(patches)
    inputs = assemble_fusion_batch(raw, out.p_mitosis, out.attention, image.width, image.height)
    raw_out, _ = model.fusion.forward(inputs)
    adjusted = adjust_detections(raw, raw_out, image.width, image.height, model.fusion_config.offset_range)
    kept = sort_detections([d for d in adjusted if d.score >= model.score_threshold])
    return CompositeTrace(raw, patches, out.p_mitosis, out.attention, inputs, raw_out, adjusted, kept)


def composite_infer(image, model):
    """
    Detections of the composite model for one image.

    Returns:
        list of Detection sorted by descending adjusted score
    """
    return composite_trace(image, model).detections


# -- in-situ fusion training -------------------------------------------------


@dataclass
class _ImageCache:
    image_id: int
    width: int
    height: int
    boxes: np.ndarray
    scores: np.ndarray
    detections: list
    inputs: np.ndarray
    gt: np.ndarray


def _cache_upstream(model, dataset, desc):
    caches = []
    for image in tqdm(dataset.images, desc=desc, unit="image", leave=False):
        trace = composite_trace(image, model)
        arr = detections_to_array(trace.raw_detections)
        caches.append(_ImageCache(image.id, image.width, image.height, arr[:, :4], arr[:, 5],
                                  trace.raw_detections, trace.fusion_inputs, dataset.points(image.id)))
    return caches


def _cached_f1(fusion, caches, config, threshold):
    totals = np.zeros(3, dtype=np.int64)
    for c in caches:
        dets = []
        if c.detections:
            raw_out, _ = fusion.forward(c.inputs)
            adjusted = adjust_detections(c.detections, raw_out, c.width, c.height, config.offset_range)
            dets = [d for d in adjusted if d.score >= threshold]
        res = match_detections(dets, c.gt, config.radius_px)
        totals += (res.true_positives, res.false_positives, res.false_negatives)
    return f1_score(*totals)


def upstream_digests(model):
    return {"detector": layers.params_digest(model.detector.params),
            "classifier": layers.params_digest(model.classifier.params)}


def train_fusion_in_situ(model, train_set, val_set, schedule, seed=0):
    """
    Train the fusion network inside the composite with frozen upstream stages.

    Each image's detections form one optimisation step. Detector outputs and
    classifier features are computed once, since neither changes. The fusion
    parameters with the best validation F1 are kept, the untrained identity
    network included.

    Returns:
        tuple: (FusionNet, history DataFrame, best dict)
    """
    if model is None or model.detector is None or model.classifier is None:
        raise PrerequisiteError("fusion training needs trained detector and classifier checkpoints")
    if len(train_set) == 0:
        raise DatasetError("cannot train the fusion network on an empty dataset")

    config = model.fusion_config
    model.freeze_upstream()

    train_cache = _cache_upstream(model, train_set, "fusion features (train)")
    val_cache = _cache_upstream(model, val_set, "fusion features (val)")
    threshold = model.score_threshold

    fusion = model.fusion
    opt = layers.SgdMomentum(fusion.params, schedule.momentum, schedule.weight_decay, schedule.clip_norm)
    rng = np.random.default_rng(seed)

    initial_f1 = _cached_f1(fusion, val_cache, config, threshold)
    best = {"epoch": -1, "validation_f1": initial_f1, "initial_validation_f1": initial_f1}
    best_params = copy.deepcopy(fusion.params)
    logger.info("fusion identity validation F1 %.4f", initial_f1)

    history = []
    for epoch in tqdm(range(schedule.epochs), desc="fusion", unit="epoch"):
        lr = lr_at_epoch(schedule.lr, epoch)
        sums = np.zeros(3)
        steps = 0
        for i in rng.permutation(len(train_cache)):
            c = train_cache[i]
            if not c.detections:
                continue
            raw_out, fcache = fusion.forward(c.inputs)
            terms, draw = fusion_loss_and_grad(raw_out, c.boxes, c.scores, c.gt, c.width, c.height, config)
            grads = fusion.backward(draw, fcache)
            opt.step(fusion.params, grads, lr)
            sums += (terms.loss, terms.bce, terms.l1)
            steps += 1
        mean = sums / max(steps, 1)
        val_f1 = _cached_f1(fusion, val_cache, config, threshold)
        history.append({"epoch": epoch, "lr": lr, "loss": mean[0], "loss_bce": mean[1], "loss_l1": mean[2],
                        "validation_f1": val_f1})
        logger.info("fusion epoch %d lr=%.3g loss=%.4f val_f1=%.4f", epoch, lr, mean[0], val_f1)
        if val_f1 > best["validation_f1"]:
            best.update(epoch=epoch, validation_f1=val_f1)
            best_params = copy.deepcopy(fusion.params)

    fusion.params = best_params
    best["upstream_digests"] = model.verify_frozen()
    return fusion, pd.DataFrame(history), best


# -- persistence ---------------------------------------------------------------


def write_manifest(directory, config_hashes=None, seed=None):
    """Write ``manifest.json`` for stage checkpoints already under ``directory``."""
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "stages": {name: name for name in STAGES},
        "config_hashes": dict(config_hashes or {}),
        "seed": seed,
    }
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, "manifest.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def save_model(model, directory, config_hashes=None, seed=None):
    """Write the three stage checkpoints and ``manifest.json``."""
    model.detector.save(os.path.join(directory, "detector"), seed=seed)
    model.classifier.save(os.path.join(directory, "classifier"), seed=seed)
    model.fusion.save(os.path.join(directory, "fusion"), seed=seed, **_fusion_meta(model.fusion_config))
    return write_manifest(directory, config_hashes, seed)


def _fusion_meta(config):
    return {"lambda": config.loss_lambda, "radius": config.radius_px, "offset_range": config.offset_range}


def load_model(directory):
    """
    Rebuild a CompositeModel saved by ``save_model``.

    Raises:
        CheckpointError: missing or corrupt files, or an unknown schema version
    """
    path = os.path.join(directory, "manifest.json")
    if not os.path.isfile(path):
        raise CheckpointError(f"no composite model at {directory} (manifest.json missing)")
    try:
        with open(path, encoding="utf-8") as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt manifest {path}: {e}") from e
    version = manifest.get("schema_version") if isinstance(manifest, dict) else None
    if version != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: schema_version {version!r} is not supported (expected {SCHEMA_VERSION})")

    stages = manifest.get("stages", {})
    detector, _ = FcosDetector.load(os.path.join(directory, stages.get("detector", "detector")))
    classifier, _ = FalCnn.load(os.path.join(directory, stages.get("classifier", "classifier")))
    fusion, meta = FusionNet.load(os.path.join(directory, stages.get("fusion", "fusion")))
    config = FusionConfig(offset_range=meta.get("offset_range", 28.0), loss_lambda=meta.get("lambda", 1.0),
                          radius_px=meta.get("radius", 30.0))
    return CompositeModel(detector, classifier, fusion, config)
