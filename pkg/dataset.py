"""
Annotation ingestion, mini-patch extraction and the synthetic mitosis dataset.

Annotation files are UTF-8 JSON:

    {"split": "train",                      # optional provenance
     "images": [{"id": 0, "file": "images/00000.png", "width": 224, "height": 224}],
     "annotations": [{"image_id": 0, "x": 101.5, "y": 40.0, "label": "mitotic"}]}

Image files are PNGs referenced relative to the annotation file. Pixels are
scaled to [0, 1] on load; no mean/std normalisation is applied.
"""

import json
import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from errors import ConfigError, DatasetError
from geometry import Box, clamp_box

logger = logging.getLogger(__name__)

MITOTIC = 0
NON_MITOTIC = 1
LABEL_NAMES = {MITOTIC: "mitotic", NON_MITOTIC: "non_mitotic"}
LABEL_IDS = {name: label for label, name in LABEL_NAMES.items()}

PATCH_SIZE = 56
MIN_IMAGE_SIZE = 56


@dataclass
class ImageRecord:
    id: int
    file: str
    width: int
    height: int
    pixels: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.width < MIN_IMAGE_SIZE or self.height < MIN_IMAGE_SIZE:
            raise DatasetError(f"image {self.id} is {self.width}x{self.height}, smaller than {MIN_IMAGE_SIZE}px")
        if self.pixels.shape != (self.height, self.width, 3):
            raise DatasetError(
                f"image {self.id} pixels have shape {self.pixels.shape}, expected ({self.height}, {self.width}, 3)")


@dataclass(frozen=True)
class PointAnnotation:
    image_id: int
    x: float
    y: float
    label: int

    def __post_init__(self):
        if self.label not in LABEL_NAMES:
            raise ValueError(f"unknown label {self.label}")


@dataclass
class Patch:
    pixels: np.ndarray = field(repr=False)
    source_image_id: int
    source_center: tuple
    label: int

    @property
    def key(self):
        return (self.source_image_id, self.source_center, self.label)


@dataclass
class PatchSet:
    patches: list

    @property
    def class_counts(self):
        counts = Counter(p.label for p in self.patches)
        return {label: counts.get(label, 0) for label in sorted(LABEL_NAMES)}

    def __len__(self):
        return len(self.patches)

    def arrays(self, dtype=np.float32):
        """
        Stack patches for the classifier.

        Returns:
            tuple: ((N, 3, 56, 56) pixels, (N,) integer labels)
        """
        if not self.patches:
            return np.zeros((0, 3, PATCH_SIZE, PATCH_SIZE), dtype=dtype), np.zeros(0, dtype=np.int64)
        x = np.stack([p.pixels for p in self.patches]).transpose(0, 3, 1, 2).astype(dtype)
        y = np.array([p.label for p in self.patches], dtype=np.int64)
        return x, y


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.7
    test_fraction: float = 0.2
    validation_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fractions = (self.train_fraction, self.test_fraction, self.validation_fraction)
        if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must be non-negative and sum to 1, got {fractions}")


@dataclass(frozen=True)
class SyntheticConfig:
    image_count: int = 200
    image_size: int = 224
    positives_per_image: int = 3
    distractors_per_image: int = 3
    validation_images: int = 40
    test_images: int = 40
    min_separation: float = 40.0
    border_margin: float = 28.0
    max_placement_tries: int = 1000

    def validate(self):
        if self.image_size < 112:
            raise ConfigError(f"synthetic image_size must be >= 112, got {self.image_size}")
        for name in ("image_count", "positives_per_image", "distractors_per_image",
                     "validation_images", "test_images"):
            if getattr(self, name) < 0:
                raise ConfigError(f"synthetic {name} must be non-negative")


class DetectionDataset:
    """Images with their point annotations and the split they came from."""

    def __init__(self, images, annotations, split=None, source=None):
        self.images = list(images)
        self.annotations = list(annotations)
        self.split = split
        self.source = source
        self._by_image = {im.id: [] for im in self.images}
        for a in self.annotations:
            self._by_image[a.image_id].append(a)

    @classmethod
    def from_file(cls, path):
        doc = _read_document(path)
        images, annotations = _records_from_document(doc, path)
        split = doc.get("split")
        return cls(images, annotations, split=split, source=path)

    def __len__(self):
        return len(self.images)

    def annotations_for(self, image_id):
        return self._by_image.get(image_id, [])

    def points(self, image_id, label=MITOTIC):
        """(K, 2) array of annotated (x, y) points with the given label."""
        pts = [(a.x, a.y) for a in self.annotations_for(image_id) if a.label == label]
        return np.array(pts, dtype=np.float64).reshape(-1, 2)

    def gt_boxes(self, image, box_size):
        return points_to_boxes(self.points(image.id), box_size, image.width, image.height)

    def save(self, directory, name="annotations.json"):
        return save_dataset(self.images, self.annotations, directory, name=name, split=self.split)


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

def _field(obj, key, kinds, where):
    if not isinstance(obj, dict) or key not in obj:
        raise DatasetError(f"{where}: missing field '{key}'")
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, kinds):
        raise DatasetError(f"{where}.{key}: expected {_kind_name(kinds)}, got {value!r}")
    return value


def _kind_name(kinds):
    kinds = kinds if isinstance(kinds, tuple) else (kinds,)
    return " or ".join(k.__name__ for k in kinds)


def read_png(path):
    """Read a PNG as an (H, W, 3) float32 array in [0, 1]."""
    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return rgb.astype(np.float32) / 255.0


def write_png(path, pixels):
    """Write an (H, W, 3) array in [0, 1] (or uint8) as a PNG."""
    arr = pixels if pixels.dtype == np.uint8 else np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def load_dataset(annotation_file_path):
    """
    Parse an annotation file and load the images it references.

    Args:
        annotation_file_path: path to the JSON annotation file

    Returns:
        tuple: (list of ImageRecord, list of PointAnnotation)
    """
    path = annotation_file_path
    return _records_from_document(_read_document(path), path)


def _read_document(path):
    if not os.path.isfile(path):
        raise DatasetError(f"annotation file not found: {path}")
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from e
    except UnicodeDecodeError as e:
        raise DatasetError(f"{path}: not UTF-8 text: {e}") from e
    if not isinstance(doc, dict):
        raise DatasetError(f"{path}: top level must be an object")
    return doc


def _records_from_document(doc, path):
    raw_images = _field(doc, "images", list, path)
    raw_annotations = _field(doc, "annotations", list, path)
    base = os.path.dirname(os.path.abspath(path))

    images = []
    seen = set()
    for i, entry in enumerate(raw_images):
        where = f"{path}: images[{i}]"
        image_id = _field(entry, "id", int, where)
        file = _field(entry, "file", str, where)
        width = _field(entry, "width", int, where)
        height = _field(entry, "height", int, where)
        if image_id in seen:
            raise DatasetError(f"{where}.id: duplicate image id {image_id}")
        seen.add(image_id)
        image_path = os.path.join(base, file)
        if not os.path.isfile(image_path):
            raise DatasetError(f"{where}.file: missing image file {image_path}")
        pixels = read_png(image_path)
        if pixels.shape[:2] != (height, width):
            raise DatasetError(
                f"{where}: declared {width}x{height} but {file} is {pixels.shape[1]}x{pixels.shape[0]}")
        images.append(ImageRecord(image_id, file, width, height, pixels))

    sizes = {im.id: (im.width, im.height) for im in images}
    annotations = []
    for i, entry in enumerate(raw_annotations):
        where = f"{path}: annotations[{i}]"
        image_id = _field(entry, "image_id", int, where)
        x = float(_field(entry, "x", (int, float), where))
        y = float(_field(entry, "y", (int, float), where))
        label_name = _field(entry, "label", str, where)
        if label_name not in LABEL_IDS:
            raise DatasetError(f"{where}.label: expected 'mitotic' or 'non_mitotic', got {label_name!r}")
        if image_id not in sizes:
            raise DatasetError(f"{where}.image_id: unknown image id {image_id}")
        width, height = sizes[image_id]
        if not (0.0 <= x <= width and 0.0 <= y <= height):
            raise DatasetError(f"{where}: point ({x:g}, {y:g}) outside the {width}x{height} image {image_id}")
        annotations.append(PointAnnotation(image_id, x, y, LABEL_IDS[label_name]))

    logger.info("loaded %d images and %d annotations from %s", len(images), len(annotations), path)
    return images, annotations


def save_dataset(images, annotations, directory, name="annotations.json", split=None):
    """
    Write images as PNGs under ``directory/images`` and the annotation JSON.

    Returns:
        str: path of the annotation file
    """
    os.makedirs(directory, exist_ok=True)
    entries = []
    for im in images:
        file = im.file or f"images/{im.id:05d}.png"
        write_png(os.path.join(directory, file), im.pixels)
        entries.append({"id": im.id, "file": file, "width": im.width, "height": im.height})
    doc = {
        "images": entries,
        "annotations": [
            {"image_id": a.image_id, "x": a.x, "y": a.y, "label": LABEL_NAMES[a.label]}
            for a in annotations
        ],
    }
    if split is not None:
        doc = {"split": split, **doc}
    path = os.path.join(directory, name)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")
    return path


def points_to_boxes(points, box_size, width, height):
    """Fixed-size ground-truth boxes centred on annotated points, clamped to the image."""
    return [clamp_box(Box.from_center(x, y, box_size), width, height) for x, y in np.asarray(points).reshape(-1, 2)]


# ---------------------------------------------------------------------------
# mini-patches
# ---------------------------------------------------------------------------

def round_half_up(v):
    return int(math.floor(v + 0.5))


def extract_patch(image, center, size=PATCH_SIZE, label=MITOTIC):
    """
    Cut a size x size window centred on ``center``; pixels outside the image are zero.

    The window spans rows [round(y) - size/2, round(y) + size/2) and the same
    for columns, with round-half-up rounding.
    """
    if size <= 0 or size % 2:
        raise ValueError(f"patch size must be a positive even integer, got {size}")
    x, y = center
    if not (0.0 <= x <= image.width and 0.0 <= y <= image.height):
        raise DatasetError(f"patch center ({x}, {y}) outside {image.width}x{image.height} image {image.id}")

    half = size // 2
    x0 = round_half_up(x) - half
    y0 = round_half_up(y) - half
    out = np.zeros((size, size, 3), dtype=image.pixels.dtype)
    ys0, ys1 = max(y0, 0), min(y0 + size, image.height)
    xs0, xs1 = max(x0, 0), min(x0 + size, image.width)
    if ys1 > ys0 and xs1 > xs0:
        out[ys0 - y0:ys1 - y0, xs0 - x0:xs1 - x0] = image.pixels[ys0:ys1, xs0:xs1]
    return Patch(out, image.id, (float(x), float(y)), label)


def _sample_background_centers(images, positives, count, rng, exclusion, max_tries):
    if count <= 0:
        return []
    pos_by_image = {}
    for a in positives:
        pos_by_image.setdefault(a.image_id, []).append((a.x, a.y))
    pos_by_image = {k: np.array(v) for k, v in pos_by_image.items()}

    centers = []
    for _ in range(count):
        for _ in range(max_tries):
            im = images[int(rng.integers(len(images)))]
            x = float(rng.uniform(0.0, im.width))
            y = float(rng.uniform(0.0, im.height))
            pts = pos_by_image.get(im.id)
            if pts is None or np.all(np.hypot(pts[:, 0] - x, pts[:, 1] - y) >= exclusion):
                centers.append((im, x, y))
                break
        else:
            raise DatasetError(
                f"could not place a negative patch at least {exclusion}px from every positive "
                f"after {max_tries} tries; images are too small or too crowded")
    return centers


def build_balanced_patchset(images, annotations, negatives_per_positive=1, seed=0,
                            size=PATCH_SIZE, max_tries=1000):
    """
    One patch per mitotic annotation plus an equal number of negatives.

    Negatives come from non_mitotic annotations first; any deficit is filled
    with random centres at least ``size`` px from every positive centre.
    """
    positives = [a for a in annotations if a.label == MITOTIC]
    if not positives:
        raise DatasetError("cannot build a patch set without any mitotic annotation")
    rng = np.random.default_rng(seed)
    by_id = {im.id: im for im in images}

    hard = [a for a in annotations if a.label == NON_MITOTIC]
    wanted = len(positives) * negatives_per_positive
    if len(hard) > wanted:
        keep = np.sort(rng.choice(len(hard), size=wanted, replace=False))
        hard = [hard[i] for i in keep]
    filler = _sample_background_centers(images, positives, wanted - len(hard), rng, size, max_tries)

    patches = [extract_patch(by_id[a.image_id], (a.x, a.y), size, MITOTIC) for a in positives]
    patches += [extract_patch(by_id[a.image_id], (a.x, a.y), size, NON_MITOTIC) for a in hard]
    patches += [extract_patch(im, (x, y), size, NON_MITOTIC) for im, x, y in filler]
    logger.info("patch set: %d positives, %d hard negatives, %d random negatives",
                len(positives), len(hard), len(filler))
    return PatchSet(patches)


def split_patchset(patchset, spec):
    """
    Stratified, seeded split into (train, test, validation) patch sets.

    Per label: floor(n * train_fraction) train, floor(n * test_fraction)
    test, the remainder validation.
    """
    rng = np.random.default_rng(spec.seed)
    train, test, val = [], [], []
    for label in sorted({p.label for p in patchset.patches}):
        members = [p for p in patchset.patches if p.label == label]
        order = rng.permutation(len(members))
        n = len(members)
        n_train = math.floor(n * spec.train_fraction + 1e-9)
        n_test = math.floor(n * spec.test_fraction + 1e-9)
        shuffled = [members[i] for i in order]
        train += shuffled[:n_train]
        test += shuffled[n_train:n_train + n_test]
        val += shuffled[n_train + n_test:]
    return PatchSet(train), PatchSet(test), PatchSet(val)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

BACKGROUND_RGB = np.array([0.91, 0.74, 0.84])
MITOTIC_RGB = np.array([0.16, 0.05, 0.26])
DISTRACTOR_RGB = np.array([0.58, 0.42, 0.68])


def _place_centers(count, config, rng):
    size = config.image_size
    lo, hi = config.border_margin, size - config.border_margin
    centers = []
    for _ in range(count):
        for _ in range(config.max_placement_tries):
            c = rng.uniform(lo, hi, size=2)
            if all(math.hypot(c[0] - p[0], c[1] - p[1]) >= config.min_separation for p in centers):
                centers.append((float(c[0]), float(c[1])))
                break
        else:
            raise DatasetError(
                f"cannot place {count} objects {config.min_separation}px apart in a "
                f"{size}x{size} image after {config.max_placement_tries} tries")
    return centers


def _paint_blob(img, cx, cy, rng, color, semi_axes, irregularity, opacity):
    """Alpha-blend an irregular ellipse with a soft edge into ``img`` in place."""
    size = img.shape[0]
    a, b = semi_axes
    theta = rng.uniform(0.0, np.pi)
    harmonics = [(k, rng.uniform(-irregularity, irregularity), rng.uniform(0.0, 2 * np.pi)) for k in (2, 3, 5)]

    reach = int(math.ceil(max(a, b) * (1.0 + 3 * irregularity))) + 2
    y0, y1 = max(int(cy) - reach, 0), min(int(cy) + reach + 1, size)
    x0, x1 = max(int(cx) - reach, 0), min(int(cx) + reach + 1, size)
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
    v = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
    rho = np.hypot(u, v)
    phi = np.arctan2(v, u)
    boundary = 1.0 + sum(amp * np.cos(k * phi + phase) for k, amp, phase in harmonics)

    alpha = np.clip((boundary - rho) / 0.15, 0.0, 1.0) * opacity
    speckle = color + 0.04 * rng.standard_normal((y1 - y0, x1 - x0, 3))
    region = img[y0:y1, x0:x1]
    img[y0:y1, x0:x1] = region * (1.0 - alpha[..., None]) + speckle * alpha[..., None]


def _render_image(config, rng):
    size = config.image_size
    texture = gaussian_filter(rng.standard_normal((size, size)), sigma=3.0)
    texture /= max(np.abs(texture).max(), 1e-12)
    img = BACKGROUND_RGB[None, None, :] + 0.06 * texture[..., None] + 0.02 * rng.standard_normal((size, size, 3))

    centers = _place_centers(config.positives_per_image + config.distractors_per_image, config, rng)
    positives = centers[:config.positives_per_image]
    distractors = centers[config.positives_per_image:]
    for cx, cy in positives:
        axes = (rng.uniform(8.0, 12.0), rng.uniform(4.5, 7.0))
        _paint_blob(img, cx, cy, rng, MITOTIC_RGB, axes, irregularity=0.18, opacity=0.95)
    for cx, cy in distractors:
        r = rng.uniform(6.5, 9.5)
        _paint_blob(img, cx, cy, rng, DISTRACTOR_RGB, (r, r * rng.uniform(0.88, 1.0)), irregularity=0.04, opacity=0.6)

    pixels = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return pixels, positives, distractors


def generate_synthetic_dataset(config, seed, first_id=0):
    """
    Render ``config.image_count`` images with dark irregular "mitotic" objects
    and paler round distractors.

    Image ``k`` uses its own random stream seeded with ``seed + first_id + k``,
    so any subset can be regenerated independently.

    Returns:
        tuple: (list of ImageRecord, list of PointAnnotation)
    """
    config.validate()
    images, annotations = [], []
    for k in range(config.image_count):
        image_id = first_id + k
        rng = np.random.default_rng(seed + image_id)
        pixels, positives, distractors = _render_image(config, rng)
        size = config.image_size
        images.append(ImageRecord(image_id, f"images/{image_id:05d}.png", size, size,
                                  pixels.astype(np.float32) / 255.0))
        annotations += [PointAnnotation(image_id, x, y, MITOTIC) for x, y in positives]
        annotations += [PointAnnotation(image_id, x, y, NON_MITOTIC) for x, y in distractors]
    logger.info("generated %d synthetic images (seed %d, first id %d)", len(images), seed, first_id)
    return images, annotations


def generate_synthetic_splits(config, seed):
    """
    Train, validation and test datasets with disjoint image ids.

    Returns:
        dict: split name -> DetectionDataset
    """
    counts = (("train", config.image_count), ("val", config.validation_images), ("test", config.test_images))
    splits = {}
    first_id = 0
    for name, count in counts:
        sub = replace(config, image_count=count)
        images, annotations = generate_synthetic_dataset(sub, seed, first_id=first_id)
        splits[name] = DetectionDataset(images, annotations, split=name)
        first_id += count
    return splits
