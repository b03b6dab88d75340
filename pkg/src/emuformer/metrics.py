"""Evaluation metrics: mIoU, ECE, RMSE, delta accuracy and the conditional
uncertainty metrics p(accurate|certain), p(uncertain|inaccurate) and PAvPU.

mIoU, ECE, RMSE and delta accuracies accumulate over the whole dataset. The
conditional metrics use a per-image threshold (the image's mean uncertainty)
and are therefore computed per image and averaged afterwards.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import EmptyMaskError

log = logging.getLogger(__name__)

EPS_DEPTH = 1e-3
SEG_KEYS = ("miou", "ece", "p_acc_cer", "p_unc_inacc", "pavpu")
DEPTH_KEYS = ("rmse", "delta1", "delta2", "delta3", "p_acc_cer", "p_unc_inacc", "pavpu")
TIMING_KEYS = ("mean_ms", "std_ms")


def _require(mask):
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMaskError("no valid pixels")
    return mask


class ConfusionMatrix:
    """Dataset-level confusion matrix; rows are ground truth, columns predictions."""

    def __init__(self, num_classes: int, ignore_index: int = 255):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.matrix = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred, gt):
        pred, gt = np.asarray(pred).ravel(), np.asarray(gt).ravel()
        keep = gt != self.ignore_index
        c = self.num_classes
        self.matrix += np.bincount(gt[keep].astype(np.int64) * c + pred[keep].astype(np.int64),
                                   minlength=c * c).reshape(c, c)

    def iou(self) -> np.ndarray:
        tp = np.diag(self.matrix).astype(float)
        union = self.matrix.sum(0) + self.matrix.sum(1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / union, np.nan)

    def miou(self) -> float:
        if self.matrix.sum() == 0:
            raise EmptyMaskError("no valid pixels")
        # averaged over classes that occur in the ground truth
        present = self.matrix.sum(1) > 0
        return float(np.mean(self.iou()[present]))


def miou(pred_labels, gt_labels, num_classes: int, ignore_index: int = 255) -> float:
    cm = ConfusionMatrix(num_classes, ignore_index)
    if isinstance(pred_labels, np.ndarray) and pred_labels.ndim == 2:
        pred_labels, gt_labels = [pred_labels], [gt_labels]
    for p, g in zip(pred_labels, gt_labels):
        cm.update(p, g)
    return cm.miou()


class CalibrationBins:
    """Equal-width confidence bins over [0, 1]; bin b covers (b/B, (b+1)/B], bin 0 also holds 0."""

    def __init__(self, n_bins: int = 15):
        self.n_bins = n_bins
        self.count = np.zeros(n_bins, dtype=np.int64)
        self.conf_sum = np.zeros(n_bins)
        self.acc_sum = np.zeros(n_bins)

    def update(self, confidences, correct):
        conf = np.asarray(confidences, dtype=float).ravel()
        corr = np.asarray(correct, dtype=float).ravel()
        idx = np.clip(np.ceil(conf * self.n_bins).astype(int) - 1, 0, self.n_bins - 1)
        self.count += np.bincount(idx, minlength=self.n_bins)
        self.conf_sum += np.bincount(idx, weights=conf, minlength=self.n_bins)
        self.acc_sum += np.bincount(idx, weights=corr, minlength=self.n_bins)

    def ece(self) -> float:
        n = self.count.sum()
        if n == 0:
            raise EmptyMaskError("no samples")
        nz = self.count > 0
        gap = np.abs(self.acc_sum[nz] - self.conf_sum[nz]) / self.count[nz]
        return float(np.sum(self.count[nz] / n * gap))


def ece(max_probs, correctness, bins: int = 15) -> float:
    cb = CalibrationBins(bins)
    cb.update(max_probs, correctness)
    return cb.ece()


def rmse(pred_depth, gt_depth, mask) -> float:
    mask = _require(mask)
    err = np.asarray(pred_depth, float)[mask] - np.asarray(gt_depth, float)[mask]
    return float(np.sqrt(np.mean(err ** 2)))


def depth_accuracy(pred, gt, mask=None, k: int = 1, eps: float = EPS_DEPTH) -> np.ndarray:
    """Per-pixel delta_k accuracy: max(pred/gt, gt/pred) < 1.25**k (False off-mask)."""
    pred = np.maximum(np.asarray(pred, float), eps)
    gt = np.asarray(gt, float)
    valid = gt > 0 if mask is None else np.asarray(mask, bool)
    safe_gt = np.where(valid, gt, 1.0)
    ratio = np.maximum(pred / safe_gt, safe_gt / pred)
    return valid & (ratio < 1.25 ** k)


def uncertainty_threshold(unc_map, mask) -> float:
    mask = _require(mask)
    return float(np.mean(np.asarray(unc_map, float)[mask]))


@dataclass
class ConfusionCounts:
    n_ac: int = 0
    n_au: int = 0
    n_ic: int = 0
    n_iu: int = 0

    @property
    def total(self) -> int:
        return self.n_ac + self.n_au + self.n_ic + self.n_iu


def confusion_counts(accurate, unc_map, mask, patch: int | None = None) -> ConfusionCounts:
    """Classify pixels (or patches) of one image against the image's mean-uncertainty threshold."""
    mask = _require(mask)
    accurate = np.asarray(accurate, bool)
    unc = np.asarray(unc_map, float)
    thr = uncertainty_threshold(unc, mask)
    if patch is None or patch <= 1:
        acc, uncertain = accurate[mask], unc[mask] > thr
    else:
        accs, uncs = [], []
        h, w = mask.shape
        for i in range(0, h, patch):
            for j in range(0, w, patch):
                m = mask[i:i + patch, j:j + patch]
                if m.any():
                    accs.append(accurate[i:i + patch, j:j + patch][m].mean() >= 0.5)
                    uncs.append(unc[i:i + patch, j:j + patch][m].mean())
        acc, uncertain = np.array(accs), np.array(uncs) > thr
    return ConfusionCounts(
        n_ac=int(np.sum(acc & ~uncertain)), n_au=int(np.sum(acc & uncertain)),
        n_ic=int(np.sum(~acc & ~uncertain)), n_iu=int(np.sum(~acc & uncertain)),
    )


def conditional_metrics(counts: ConfusionCounts) -> tuple[float, float, float]:
    """(p_acc_cer, p_unc_inacc, pavpu); a conditional with an empty denominator is NaN."""
    if counts.total <= 0:
        raise EmptyMaskError("no counted pixels")
    cer = counts.n_ac + counts.n_ic
    inacc = counts.n_ic + counts.n_iu
    p_acc_cer = counts.n_ac / cer if cer else math.nan
    p_unc_inacc = counts.n_iu / inacc if inacc else math.nan
    pavpu = (counts.n_ac + counts.n_iu) / counts.total
    return p_acc_cer, p_unc_inacc, pavpu


def _nan_to_none(v):
    if v is None:
        return None
    v = float(v)
    return None if math.isnan(v) else v


@dataclass
class MetricsReport:
    seg: dict = field(default_factory=lambda: dict.fromkeys(SEG_KEYS))
    depth: dict = field(default_factory=lambda: dict.fromkeys(DEPTH_KEYS))
    timing: dict = field(default_factory=lambda: dict.fromkeys(TIMING_KEYS))
    params: int | None = None
    per_image: list = field(default_factory=list, repr=False)  # (image_id, metric, value)

    def to_dict(self) -> dict:
        return {
            "seg": {k: _nan_to_none(self.seg.get(k)) for k in SEG_KEYS},
            "depth": {k: _nan_to_none(self.depth.get(k)) for k in DEPTH_KEYS},
            "timing": {k: _nan_to_none(self.timing.get(k)) for k in TIMING_KEYS},
            "params": self.params,
        }

    def save(self, path, csv_path=None) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["image_id", "metric", "value"])
                writer.writerows(self.per_image)


def _dataset_mean(values, name):
    arr = np.asarray(values, float)
    excluded = int(np.isnan(arr).sum())
    if excluded:
        log.info("%s: %d image(s) excluded (empty conditional)", name, excluded)
    if arr.size == excluded:
        return math.nan
    return float(np.nanmean(arr))


class MetricsAccumulator:
    """Streams per-image predictions and ground truth into a :class:`MetricsReport`."""

    def __init__(self, num_classes: int | None, ece_bins: int = 15, patch: int | None = None,
                 eps_depth: float = EPS_DEPTH, ignore_index: int = 255):
        self.num_classes = num_classes
        self.patch = patch
        self.eps_depth = eps_depth
        self.ignore_index = ignore_index
        self.cm = ConfusionMatrix(num_classes, ignore_index) if num_classes else None
        self.bins = CalibrationBins(ece_bins)
        self.sq_err = 0.0
        self.n_depth = 0
        self.delta_hits = np.zeros(3, dtype=np.int64)
        self.cond = {"seg": [], "depth": []}
        self.rows = []

    def update_seg(self, image_id, mean_probs, entropy, gt):
        """mean_probs: C x H x W, entropy: H x W, gt: H x W labels."""
        mean_probs, gt = np.asarray(mean_probs), np.asarray(gt)
        mask = gt != self.ignore_index
        if not mask.any():
            return
        pred = mean_probs.argmax(0)
        self.cm.update(pred, gt)
        correct = pred == gt
        self.bins.update(mean_probs.max(0)[mask], correct[mask])
        self._conditional("seg", image_id, correct, entropy, mask)

    def update_depth(self, image_id, mean_depth, pred_var, gt):
        mean_depth, gt = np.asarray(mean_depth, float), np.asarray(gt, float)
        mask = np.isfinite(gt) & (gt > 0)
        if not mask.any():
            return
        self.sq_err += float(np.sum((mean_depth[mask] - gt[mask]) ** 2))
        self.n_depth += int(mask.sum())
        for k in (1, 2, 3):
            self.delta_hits[k - 1] += int(depth_accuracy(mean_depth, gt, mask, k, self.eps_depth).sum())
        accurate = depth_accuracy(mean_depth, gt, mask, 1, self.eps_depth)
        self._conditional("depth", image_id, accurate, pred_var, mask)

    def _conditional(self, task, image_id, accurate, unc, mask):
        vals = conditional_metrics(confusion_counts(accurate, unc, mask, self.patch))
        self.cond[task].append(vals)
        for name, v in zip(("p_acc_cer", "p_unc_inacc", "pavpu"), vals):
            self.rows.append((image_id, f"{task}.{name}", v))

    def report(self) -> MetricsReport:
        rep = MetricsReport(per_image=list(self.rows))
        if self.cm is not None and self.cm.matrix.sum() > 0:
            rep.seg["miou"] = self.cm.miou()
            rep.seg["ece"] = self.bins.ece()
        if self.n_depth:
            rep.depth["rmse"] = math.sqrt(self.sq_err / self.n_depth)
            for k in (1, 2, 3):
                rep.depth[f"delta{k}"] = self.delta_hits[k - 1] / self.n_depth
        for task in ("seg", "depth"):
            if self.cond[task]:
                arr = np.array(self.cond[task], float)
                section = rep.seg if task == "seg" else rep.depth
                for i, name in enumerate(("p_acc_cer", "p_unc_inacc", "pavpu")):
                    section[name] = _dataset_mean(arr[:, i], f"{task}.{name}")
        return rep
