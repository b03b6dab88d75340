"""Training objectives and uncertainty functionals.

Every loss takes batched maps (B x ... x H x W; an unbatched map is promoted)
and a boolean validity mask. Pixel losses are averaged over the valid pixels
of each image and then over the images of the batch; images without a single
valid pixel are skipped. The distillation RMSLE is the exception: its mean
runs over all valid pixels of the batch before the square root.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch

from .config import LossWeights

PROB_FLOOR = 1e-12
IGNORE_INDEX = 255


class EmptyMaskError(ValueError):
    pass


def _batch(x: torch.Tensor, spatial_ndim: int) -> torch.Tensor:
    return x[None] if x.ndim == spatial_ndim else x


def _check_mask(mask: torch.Tensor) -> torch.Tensor:
    mask = mask.bool()
    if not mask.any():
        raise EmptyMaskError("no valid pixels")
    return mask


def masked_mean(per_pixel: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over valid pixels per image, then over images that have any."""
    per_pixel = _batch(per_pixel, 2)
    mask = _check_mask(_batch(mask, 2))
    zero = per_pixel.new_zeros(())
    sums = torch.where(mask, per_pixel, zero).sum(dim=(-2, -1))
    counts = mask.sum(dim=(-2, -1))
    has = counts > 0
    return (sums[has] / counts[has].to(per_pixel.dtype)).mean()


def seg_mask(labels: torch.Tensor, ignore_index: int = IGNORE_INDEX) -> torch.Tensor:
    return labels != ignore_index


def depth_mask(depth: torch.Tensor) -> torch.Tensor:
    return torch.isfinite(depth) & (depth > 0)


def cross_entropy(probs, labels, mask=None, ignore_index: int = IGNORE_INDEX):
    probs = _batch(probs, 3)
    labels = _batch(labels, 2).long()
    mask = seg_mask(labels, ignore_index) if mask is None else _batch(mask, 2).bool()
    mask = _check_mask(mask)
    num_classes = probs.shape[1]
    bad = mask & ((labels < 0) | (labels >= num_classes))
    if bad.any():
        raise ValueError(f"label out of range [0, {num_classes}) on valid pixels")
    safe = torch.where(mask, labels, torch.zeros_like(labels))
    p_true = probs.gather(1, safe[:, None]).squeeze(1)
    return masked_mean(-torch.log(p_true.clamp_min(PROB_FLOOR)), mask)


def predictive_entropy(probs, dim: int = 1):
    """-sum p log p over ``dim`` with 0 log 0 = 0."""
    return -torch.xlogy(probs, probs).sum(dim=dim)


def gnll(mu, s2, y, mask=None):
    mu, s2, y = _batch(mu, 2), _batch(s2, 2), _batch(y, 2)
    mask = depth_mask(y) if mask is None else _batch(mask, 2).bool()
    y = torch.where(mask, y, torch.zeros_like(y))
    return masked_mean(0.5 * ((y - mu) ** 2 / s2 + torch.log(s2)), mask)


def mse(mu, y, mask=None):
    mu, y = _batch(mu, 2), _batch(y, 2)
    mask = depth_mask(y) if mask is None else _batch(mask, 2).bool()
    y = torch.where(mask, y, torch.zeros_like(y))
    return masked_mean((mu - y) ** 2, mask)


def huber(mu, y, mask=None, delta: float = 1.0):
    mu, y = _batch(mu, 2), _batch(y, 2)
    mask = depth_mask(y) if mask is None else _batch(mask, 2).bool()
    y = torch.where(mask, y, torch.zeros_like(y))
    r = (mu - y).abs()
    per_pixel = torch.where(r <= delta, 0.5 * r ** 2, delta * (r - 0.5 * delta))
    return masked_mean(per_pixel, mask)


def depth_loss(kind: str, mu, s2, y, mask=None, delta: float = 1.0):
    if kind == "gnll":
        return gnll(mu, s2, y, mask)
    if kind == "mse":
        return mse(mu, y, mask)
    if kind == "huber":
        return huber(mu, y, mask, delta)
    raise ValueError(f"unknown depth loss {kind!r}")


def joint_loss(ce, gnll_value, w1: float = 1.0):
    return ce + w1 * gnll_value


def kl_distill(q, p, mask=None):
    """KL(q || p) per pixel over the class axis, averaged over valid pixels."""
    q, p = _batch(q, 3), _batch(p, 3)
    if q.shape != p.shape:
        raise ValueError(f"teacher {tuple(q.shape)} and student {tuple(p.shape)} shapes differ")
    per_pixel = (torch.xlogy(q, q) - q * torch.log(p.clamp_min(PROB_FLOOR))).sum(dim=1)
    if mask is None:
        mask = torch.ones_like(per_pixel, dtype=torch.bool)
    return masked_mean(per_pixel, _batch(mask, 2))


def rmsle_uncertainty(sigma2_teacher, s2_student, mask=None):
    sigma2_teacher, s2_student = _batch(sigma2_teacher, 2), _batch(s2_student, 2)
    if sigma2_teacher.shape != s2_student.shape:
        raise ValueError("teacher and student variance maps differ in shape")
    if mask is None:
        mask = torch.ones_like(s2_student, dtype=torch.bool)
    mask = _check_mask(_batch(mask, 2))
    sq = (torch.log1p(sigma2_teacher) - torch.log1p(s2_student)) ** 2
    sq = torch.where(mask, sq, torch.zeros_like(sq))
    mean = sq.sum() / mask.sum().to(sq.dtype)
    # clamp keeps the sqrt gradient finite when the maps agree exactly
    return torch.sqrt(mean.clamp_min(1e-30))


@dataclass
class LossBreakdown:
    total: object
    ce: object
    gnll: object
    kl: object
    rmsle: object

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(torch.as_tensor(getattr(self, f.name)).detach()) for f in fields(self)}


def emu_total(ce, gnll_value, kl, rmsle, weights: LossWeights = LossWeights()) -> LossBreakdown:
    total = ce + weights.w1 * gnll_value + weights.w2 * kl + weights.w3 * rmsle
    return LossBreakdown(total=total, ce=ce, gnll=gnll_value, kl=kl, rmsle=rmsle)
