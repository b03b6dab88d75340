import os

import numpy as np
import pytest
import torch
from PIL import Image

from emuformer.config import ModelConfig
from emuformer.data import make_synthetic_dataset
from emuformer.model import build_model
from emuformer.plots import PlotError, collect_panels, emit_plots
from emuformer.train import evaluate
from emuformer.uq import UQPredictor

TINY = ModelConfig(widths=(4, 8, 8, 8), depths=(1, 1, 1, 1), embed_dim=8, num_classes=4)


@pytest.fixture(scope="module")
def setup():
    ds = make_synthetic_dataset(3, seed=0)
    pred = UQPredictor([build_model(TINY, seed=0)])
    return pred, ds, {"single": evaluate(pred, ds)}


def test_one_image_one_panel(tmp_path, setup):
    pred, ds, _ = setup
    panels = collect_panels(pred, ds, [1])
    written = emit_plots(panels, None, tmp_path)
    assert [p.name for p in written] == ["panel_00001.png"]
    assert sorted(os.listdir(tmp_path)) == ["panel_00001.png"]


def test_range_annotation_in_file(tmp_path, setup):
    pred, ds, _ = setup
    panel = collect_panels(pred, ds, [0])[0]
    path = emit_plots([panel], None, tmp_path)[0]
    desc = Image.open(path).text["Description"]
    lo, hi = float(np.min(panel.depth_unc)), float(np.max(panel.depth_unc))
    assert "seg uncertainty range" in desc and f"depth uncertainty range [{lo:.6g}, {hi:.6g}]" in desc


def test_deterministic_bytes_and_metric_charts(tmp_path, setup):
    pred, ds, reports = setup
    panels = collect_panels(pred, ds, [0, 2])
    a = emit_plots(panels, reports, tmp_path / "a")
    b = emit_plots(panels, reports, tmp_path / "b")
    assert [p.name for p in a] == ["panel_00000.png", "panel_00002.png", "metrics_seg.png", "metrics_depth.png"]
    for x, y in zip(a, b):
        assert x.read_bytes() == y.read_bytes()


def test_unwritable_directory(tmp_path, setup):
    pred, ds, _ = setup
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(PlotError):
        emit_plots(collect_panels(pred, ds, [0]), None, blocker / "sub")
