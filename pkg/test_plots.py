import numpy as np
import numpy.testing as npt
import pandas as pd
import pytest

from dataset import read_png
from errors import ShapeError
from plots import attention_panel, plot_history, save_attention_panel


def test_attention_panel_layout(rng):
    patch = rng.random((56, 56, 3))
    attention = np.zeros((14, 14))
    attention[0, 0] = 1.0
    panel = attention_panel(patch, attention)
    assert panel.shape == (56, 112, 3) and panel.dtype == np.uint8
    npt.assert_array_equal(panel[:, :56], np.round(patch * 255).astype(np.uint8))
    # one attention cell covers a 4x4 block
    npt.assert_array_equal(panel[0, 56], panel[3, 59])
    assert panel[0, 56].sum() > panel[4, 60].sum()


def test_attention_panel_rejects_mismatched_maps(rng):
    with pytest.raises(ShapeError):
        attention_panel(rng.random((56, 56, 3)), np.zeros((13, 13)))
    with pytest.raises(ShapeError):
        attention_panel(rng.random((56, 56, 3)), np.zeros((14, 7)))


def test_saved_panel_and_history_plot(tmp_path, rng):
    path = save_attention_panel(str(tmp_path / "panel.png"), rng.random((56, 56, 3)), rng.random((14, 14)))
    assert read_png(path).shape == (56, 112, 3)

    history = pd.DataFrame({"epoch": [0, 1], "lr": [1e-3, 1e-3], "loss": [1.0, 0.5], "validation_f1": [0.1, 0.3]})
    out = plot_history(history, str(tmp_path / "history.png"))
    assert read_png(out).ndim == 3
