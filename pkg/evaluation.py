"""
Detection quality metrics: centre-distance matching, precision, recall and F1.

Counts are pooled over all images before computing the aggregate F1
(micro-averaging), the way challenge leaderboards report a single number.
"""

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.spatial import distance

from errors import DatasetError
from geometry import Box, Detection, center, clamp_box

logger = logging.getLogger(__name__)

DEFAULT_RADIUS = 30.0


@dataclass
class MatchResult:
    true_positives: int
    false_positives: int
    false_negatives: int
    pairs: list = field(default_factory=list)


def match_detections(dets, gt_points, radius_px=DEFAULT_RADIUS):
    """
    Greedy centre-distance matching.

    Detections are visited by descending score (ties by index); each takes
    the nearest still-unmatched ground-truth point within ``radius_px``.

    Args:
        dets: list of Detection
        gt_points: (K, 2) array-like of (x, y)
        radius_px: match radius in pixels

    Returns:
        MatchResult with pairs (detection index, gt index, distance)
    """
    if radius_px <= 0:
        raise ValueError(f"radius must be positive, got {radius_px}")
    gt = np.asarray(gt_points, dtype=np.float64).reshape(-1, 2)
    pairs = []
    if dets and len(gt):
        centers = np.array([center(d.box) for d in dets], dtype=np.float64)
        dist = distance.cdist(centers, gt)
        taken = np.zeros(len(gt), dtype=bool)
        order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
        for i in order:
            d = np.where(taken, np.inf, dist[i])
            j = int(np.argmin(d))
            if d[j] <= radius_px:
                taken[j] = True
                pairs.append((i, j, float(d[j])))
    tp = len(pairs)
    return MatchResult(tp, len(dets) - tp, len(gt) - tp, pairs)


def f1_score(tp, fp, fn):
    """2TP / (2TP + FP + FN), or 0 when there is nothing to score."""
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def precision(tp, fp):
    return tp / (tp + fp) if tp + fp else 0.0


def recall(tp, fn):
    return tp / (tp + fn) if tp + fn else 0.0


def summarize_counts(tp, fp, fn):
    return {
        "tp": int(tp),
        "fp": int(fp),
        "fn": int(fn),
        "precision": precision(tp, fp),
        "recall": recall(tp, fn),
        "f1": f1_score(tp, fp, fn),
    }


@dataclass
class MetricsReport:
    """Per-image rows and pooled summaries for one or more models."""

    rows: list
    summaries: dict
    config: dict = field(default_factory=dict)

    @property
    def primary(self):
        return next(iter(self.summaries))

    @property
    def f1(self):
        return self.summaries[self.primary]["f1"]

    def summary(self, model=None):
        return self.summaries[model or self.primary]

    def to_frame(self):
        return pd.DataFrame(self.rows, columns=["model", "image_id", "tp", "fp", "fn", "f1"])

    def to_json(self, extra=None):
        doc = {"model": self.primary, **self.summary(), "models": self.summaries, "config": self.config}
        if extra:
            doc.update(extra)
        return doc

    def write(self, directory, stem="metrics", extra=None):
        """
        Write ``<stem>.csv`` (per-image rows) and ``<stem>.json`` (summary).

        Returns:
            tuple: (csv path, json path)
        """
        os.makedirs(directory, exist_ok=True)
        csv_path = os.path.join(directory, f"{stem}.csv")
        json_path = os.path.join(directory, f"{stem}.json")
        self.to_frame().to_csv(csv_path, index=False, float_format="%.6f")
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump(self.to_json(extra), f, indent=2, sort_keys=True)
            f.write("\n")
        return csv_path, json_path


def evaluate_dataset(model, dataset, radius_px=DEFAULT_RADIUS, name="composite", baseline=None, config=None):
    """
    Run ``model.predict`` on every image and score it against the mitotic points.

    Args:
        model: anything with ``predict(image) -> list of Detection``
        dataset: DetectionDataset with ground truth
        radius_px: match radius
        name: report label for ``model``
        baseline: optional second model reported as "baseline"
        config: settings echoed into the JSON summary

    Returns:
        MetricsReport
    """
    if len(dataset) == 0:
        raise DatasetError("cannot evaluate on an empty dataset")
    models = [(name, model)]
    if baseline is not None:
        models.append(("baseline", baseline))

    rows, summaries = [], {}
    for label, m in models:
        totals = np.zeros(3, dtype=np.int64)
        for image in dataset.images:
            res = match_detections(m.predict(image), dataset.points(image.id), radius_px)
            counts = (res.true_positives, res.false_positives, res.false_negatives)
            totals += counts
            rows.append({"model": label, "image_id": image.id, "tp": counts[0], "fp": counts[1],
                         "fn": counts[2], "f1": f1_score(*counts)})
        summaries[label] = summarize_counts(*totals)
        logger.info("%s: tp=%d fp=%d fn=%d f1=%.4f", label, *totals, summaries[label]["f1"])
    return MetricsReport(rows, summaries, dict(config or {}, radius_px=radius_px))


class OracleDetector:
    """Emits a fixed-size, full-confidence box on every ground-truth point."""

    def __init__(self, dataset, box_size=50.0):
        self.dataset = dataset
        self.box_size = box_size

    def predict(self, image):
        return [
            Detection(clamp_box(Box.from_center(x, y, self.box_size), image.width, image.height), 0, 1.0)
            for x, y in self.dataset.points(image.id)
        ]
