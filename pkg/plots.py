"""
Figures: per-epoch training history and attention heatmap panels.
"""

import logging

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from dataset import write_png  # noqa: E402
from errors import ShapeError  # noqa: E402

logger = logging.getLogger(__name__)

# attention value 0 -> black, 1 -> pale yellow
ATTENTION_COLORMAP = "inferno"


def plot_history(history, path, title="Training history"):
    """
    Save a three-row figure: loss components, learning rate, validation metric.

    Args:
        history: DataFrame with an ``epoch`` column, ``loss*`` columns, ``lr``
            and one ``validation_*`` column
        path: PNG file to write
    """
    loss_cols = [c for c in history.columns if c.startswith("loss")]
    val_cols = [c for c in history.columns if c.startswith("validation")]

    plt.figure(figsize=(10, 8))

    plt.subplot(3, 1, 1)
    for col in loss_cols:
        plt.plot(history["epoch"], history[col], label=col)
    plt.title(title)
    plt.ylabel("Loss")
    if loss_cols:
        plt.legend()
    plt.grid(True, alpha=0.3)

    plt.subplot(3, 1, 2)
    plt.plot(history["epoch"], history["lr"])
    plt.ylabel("Learning rate")
    plt.grid(True, alpha=0.3)

    plt.subplot(3, 1, 3)
    for col in val_cols:
        plt.plot(history["epoch"], history[col], label=col)
    plt.xlabel("Epoch")
    plt.ylabel("Validation")
    plt.grid(True, alpha=0.3)

    plt.tight_layout()
    plt.savefig(path, format="png", dpi=100)
    plt.close()
    logger.info("history plot saved to %s", path)
    return path


def attention_panel(patch, attention):
    """
    Side-by-side uint8 image: the patch on the left, its attention map on the right.

    The map is upsampled to the patch size by nearest-neighbour repetition and
    coloured with ``ATTENTION_COLORMAP``.
    """
    patch = np.asarray(patch)
    attention = np.asarray(attention, dtype=np.float64)
    size = patch.shape[0]
    if (patch.shape != (size, size, 3) or attention.ndim != 2 or attention.shape[0] != attention.shape[1]
            or size % attention.shape[0]):
        raise ShapeError(f"cannot pair patch {patch.shape} with attention map {attention.shape}")
    factor = size // attention.shape[0]
    upsampled = np.kron(np.clip(attention, 0.0, 1.0), np.ones((factor, factor)))
    colored = matplotlib.colormaps[ATTENTION_COLORMAP](upsampled)[..., :3]
    left = np.round(np.clip(patch, 0.0, 1.0) * 255.0).astype(np.uint8)
    right = np.round(colored * 255.0).astype(np.uint8)
    return np.concatenate([left, right], axis=1)


def save_attention_panel(path, patch, attention):
    write_png(path, attention_panel(patch, attention))
    return path
