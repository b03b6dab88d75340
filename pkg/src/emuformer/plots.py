"""Qualitative panels and metric bar charts written as PNG files.

Rendering goes through matplotlib's Agg backend with fixed DPI and no
timestamp metadata, so identical inputs give byte-identical files.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from .data import collate  # noqa: E402
from .metrics import DEPTH_KEYS, SEG_KEYS, MetricsReport  # noqa: E402

DPI = 80
_SAVE_META = {"Software": None}


class PlotError(OSError):
    pass


@dataclass
class PanelData:
    image_id: str
    image: np.ndarray  # H x W x 3
    seg_pred: np.ndarray | None = None  # H x W class ids
    seg_unc: np.ndarray | None = None  # H x W entropy
    depth_pred: np.ndarray | None = None
    depth_unc: np.ndarray | None = None  # H x W predictive variance


def collect_panels(predictor, dataset, indices=None) -> list[PanelData]:
    """Run the predictor on selected images and keep what the panels need."""
    indices = list(range(len(dataset))) if indices is None else list(indices)
    dtype = next(predictor.models[0].parameters()).dtype
    panels = []
    for i in indices:
        s = dataset[i]
        batch = collate([s], [i], dtype)
        with torch.no_grad():
            pred = predictor.predict(batch.images, key=i)
        p = PanelData(image_id=f"{i:05d}", image=s.image)
        if pred.seg_mean_probs is not None:
            p.seg_pred = pred.seg_mean_probs[0].argmax(0).numpy()
            p.seg_unc = pred.seg_entropy[0].double().numpy()
        if pred.depth_mean is not None:
            p.depth_pred = pred.depth_mean[0].double().numpy()
            p.depth_unc = pred.depth_pred_var[0].double().numpy()
        panels.append(p)
    return panels


def _prepare_dir(out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PlotError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise PlotError(f"output directory {out} is not writable")
    return out


def _range(values):
    return float(np.min(values)), float(np.max(values))


def _save(fig, path: Path, annotations: dict) -> Path:
    meta = dict(_SAVE_META)
    meta.update({k: str(v) for k, v in annotations.items()})
    try:
        fig.savefig(path, dpi=DPI, metadata=meta)
    except OSError as exc:
        raise PlotError(f"cannot write {path}: {exc}") from exc
    finally:
        plt.close(fig)
    return path


def panel_figure(p: PanelData):
    """Figure with one column per available map; returns (figure, annotated colour ranges)."""
    cols = [("input", p.image, None)]
    if p.seg_pred is not None:
        cols += [("segmentation", p.seg_pred, "tab10"), ("seg uncertainty", p.seg_unc, "inferno")]
    if p.depth_pred is not None:
        cols += [("depth", p.depth_pred, "viridis"), ("depth uncertainty", p.depth_unc, "inferno")]
    fig, axes = plt.subplots(1, len(cols), figsize=(2.4 * len(cols), 2.6))
    axes = np.atleast_1d(axes)
    ranges = {}
    for ax, (title, data, cmap) in zip(axes, cols):
        ax.set_axis_off()
        if cmap is None:
            ax.imshow(np.clip(data, 0, 1), interpolation="nearest")
            ax.set_title(title, fontsize=8)
            continue
        if title == "segmentation":
            ax.imshow(data, cmap=cmap, vmin=0, vmax=9, interpolation="nearest")
            ax.set_title(title, fontsize=8)
            continue
        lo, hi = _range(data)
        ranges[title] = (lo, hi)
        im = ax.imshow(data, cmap=cmap, vmin=lo, vmax=hi if hi > lo else lo + 1e-12, interpolation="nearest")
        ax.set_title(f"{title}\n[{lo:.3g}, {hi:.3g}]", fontsize=8)
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    fig.tight_layout()
    return fig, ranges


def metric_figure(reports: dict[str, MetricsReport], task: str):
    keys = SEG_KEYS if task == "seg" else DEPTH_KEYS
    names = list(reports)
    x = np.arange(len(keys))
    width = 0.8 / max(len(names), 1)
    fig, ax = plt.subplots(figsize=(1.1 * len(keys) + 2, 3))
    for j, name in enumerate(names):
        d = reports[name].to_dict()[task]
        vals = [np.nan if d[k] is None else d[k] for k in keys]
        ax.bar(x + j * width, vals, width, label=name)
    ax.set_xticks(x + width * (len(names) - 1) / 2)
    ax.set_xticklabels(keys, rotation=30, fontsize=8)
    ax.set_title(f"{task} metrics", fontsize=9)
    ax.legend(fontsize=7)
    fig.tight_layout()
    return fig


def emit_plots(panels: list[PanelData], reports: dict[str, MetricsReport] | None, out_dir) -> list[Path]:
    """One ``panel_<id>.png`` per image plus ``metrics_<task>.png`` bar charts; returns written paths."""
    out = _prepare_dir(out_dir)
    written = []
    for p in panels:
        fig, ranges = panel_figure(p)
        notes = {"Description": "; ".join(f"{k} range [{lo:.6g}, {hi:.6g}]" for k, (lo, hi) in ranges.items())}
        written.append(_save(fig, out / f"panel_{p.image_id}.png", notes))
    for task in ("seg", "depth"):
        if reports and any(r.to_dict()[task][(SEG_KEYS if task == "seg" else DEPTH_KEYS)[0]] is not None
                           for r in reports.values()):
            written.append(_save(metric_figure(reports, task), out / f"metrics_{task}.png", {}))
    return written
