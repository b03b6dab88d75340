"""Student-teacher uncertainty distillation.

The teacher (a deep ensemble by default) sees a colour-jittered copy of the
student's already-augmented crop, so both views stay pixel-aligned. Its mean
softmax map and predictive depth variance become targets for a KL term and
an RMSLE term added to the usual CE + GNLL objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .config import Config, ConfigError, JitterConfig, LossConfig, LossWeights
from .data import collate, sample_rng
from .losses import (cross_entropy, depth_loss, depth_mask, emu_total, kl_distill,
                     rmsle_uncertainty, seg_mask)
from .model import SegDepthFormer, build_model, load_checkpoint, save_checkpoint
from .train import JITTER_STREAM, JointObjective, TrainResult, fit, model_dtype
from .uq import UQPredictor, aggregate_depth, aggregate_segmentation


def apply_jitter(image: np.ndarray, brightness: float = 1.0, contrast: float = 1.0,
                 saturation: float = 1.0, hue: float = 0.0) -> np.ndarray:
    """Apply explicit photometric factors in the fixed order brightness, contrast, saturation, hue."""
    x = np.asarray(image, dtype=np.float64)
    if brightness != 1.0:
        x = np.clip(x * brightness, 0, 1)
    if contrast != 1.0:
        mean = _luma(x).mean()
        x = np.clip((x - mean) * contrast + mean, 0, 1)
    if saturation != 1.0:
        gray = _luma(x)[..., None]
        x = np.clip((x - gray) * saturation + gray, 0, 1)
    if hue != 0.0:
        hsv = rgb_to_hsv(x)
        hsv[..., 0] = (hsv[..., 0] + hue) % 1.0
        x = np.clip(hsv_to_rgb(hsv), 0, 1)
    return x.astype(np.asarray(image).dtype)


def _luma(x):
    return 0.299 * x[..., 0] + 0.587 * x[..., 1] + 0.114 * x[..., 2]


def sample_jitter(cfg: JitterConfig, rng: np.random.Generator) -> dict:
    return {
        "brightness": float(rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)),
        "contrast": float(rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)),
        "saturation": float(rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)),
        "hue": float(rng.uniform(-cfg.hue, cfg.hue)),
    }


def color_jitter(image: np.ndarray, cfg: JitterConfig, seed) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return apply_jitter(image, **sample_jitter(cfg, rng))


@dataclass
class TeacherTargets:
    q: torch.Tensor  # B x C x H x W mean softmax map
    sigma2: torch.Tensor  # B x H x W predictive depth variance


def teacher_targets(teacher: UQPredictor, raw_images, jitter: JitterConfig | None, rngs=None,
                    key: int = 0, num_classes: int | None = None, dtype=None) -> TeacherTargets:
    """Jitter each H x W x 3 crop, sample the teacher and aggregate; no gradient reaches the teacher."""
    if not (teacher.cfg.has_seg and teacher.cfg.has_depth):
        raise ConfigError("teacher must predict segmentation and depth")
    if num_classes is not None and teacher.num_classes != num_classes:
        raise ConfigError(f"teacher has {teacher.num_classes} classes, student {num_classes}")
    if jitter is not None:
        rngs = rngs or [np.random.default_rng(i) for i in range(len(raw_images))]
        raw_images = [color_jitter(img, jitter, r) for img, r in zip(raw_images, rngs)]
    x = torch.from_numpy(np.ascontiguousarray(np.stack(raw_images).transpose(0, 3, 1, 2)))
    x = x.to(dtype or model_dtype(teacher.models[0]))
    with torch.no_grad(), torch.random.fork_rng(devices=[]):
        samples = teacher.sample(x, key=key)
        q, _ = aggregate_segmentation(samples)
        _, sigma2 = aggregate_depth(samples)
    return TeacherTargets(q=q.to(x.dtype), sigma2=sigma2.to(x.dtype))


def distill_mask(batch):
    """Pixels carrying any ground truth; padding from augmentation carries none."""
    return seg_mask(batch.labels) | depth_mask(batch.depth)


def distill_losses(student: SegDepthFormer, batch, targets: TeacherTargets, weights: LossWeights,
                   loss_cfg: LossConfig = LossConfig()):
    out = student(batch.images)
    if out.seg is None or out.depth is None:
        raise ConfigError("student must predict segmentation and depth")
    if targets.q.shape != out.seg.probs.shape or targets.sigma2.shape != out.depth.s2.shape:
        raise ValueError(f"teacher targets {tuple(targets.q.shape)} not aligned with student "
                         f"{tuple(out.seg.probs.shape)}")
    ce = cross_entropy(out.seg.probs, batch.labels, seg_mask(batch.labels))
    dl = depth_loss(loss_cfg.depth_loss, out.depth.mu, out.depth.s2, batch.depth,
                    depth_mask(batch.depth), loss_cfg.huber_delta)
    mask = distill_mask(batch)
    # zero-weighted terms are logged but kept out of the graph
    with torch.set_grad_enabled(weights.w2 > 0 and torch.is_grad_enabled()):
        kl = kl_distill(targets.q, out.seg.probs, mask)
    with torch.set_grad_enabled(weights.w3 > 0 and torch.is_grad_enabled()):
        rmsle = rmsle_uncertainty(targets.sigma2, out.depth.s2, mask)
    return emu_total(ce, dl, kl, rmsle, weights)


def distill_step(student, optimizer, batch, targets: TeacherTargets, weights: LossWeights,
                 loss_cfg: LossConfig = LossConfig()):
    """One optimizer update on the composite objective; returns the float breakdown."""
    optimizer.zero_grad(set_to_none=True)
    parts = distill_losses(student, batch, targets, weights, loss_cfg)
    parts.total.backward()
    optimizer.step()
    return parts.as_floats()


class DistillObjective:
    def __init__(self, teacher: UQPredictor, cfg: Config):
        self.teacher = teacher
        self.cfg = cfg
        self.cache: dict[int, tuple] = {}
        if cfg.distill.cache_targets and cfg.augment.enabled:
            raise ConfigError("cache_targets needs augment.enabled = false (targets must stay aligned)")

    def targets(self, batch, epoch) -> TeacherTargets:
        dcfg = self.cfg.distill
        idx = [int(i) for i in batch.indices]
        if dcfg.cache_targets and all(i in self.cache for i in idx):
            q, s = zip(*(self.cache[i] for i in idx))
            return TeacherTargets(torch.stack(q), torch.stack(s))
        jitter_epoch = 0 if dcfg.cache_targets else epoch
        rngs = [sample_rng(self.cfg.seed, jitter_epoch, i, JITTER_STREAM) for i in idx]
        t = teacher_targets(self.teacher, batch.raw_images, dcfg.jitter, rngs, key=idx[0],
                            num_classes=self.cfg.model.num_classes, dtype=batch.images.dtype)
        if dcfg.cache_targets:
            for j, i in enumerate(idx):
                self.cache[i] = (t.q[j], t.sigma2[j])
        return t

    def __call__(self, model, batch, head=0, epoch=0):
        return distill_losses(model, batch, self.targets(batch, epoch), self.cfg.distill.weights, self.cfg.loss)


def load_teacher(cfg: Config) -> UQPredictor:
    dcfg = cfg.distill
    if not dcfg.teacher:
        raise ConfigError("no teacher checkpoints configured")
    dtype = getattr(torch, cfg.dtype)
    members = [load_checkpoint(p, dtype=dtype) for p in dcfg.teacher]  # raises on a missing file
    if dcfg.teacher_method == "de":
        return UQPredictor(members, "de")
    return UQPredictor(members[:1], dcfg.teacher_method, samples=dcfg.teacher_samples, seed=cfg.seed)


def init_student(cfg: Config) -> SegDepthFormer:
    dtype = getattr(torch, cfg.dtype)
    if cfg.distill.student_init == "fresh":
        student = build_model(cfg.model, seed=cfg.seed, dtype=dtype)
    else:
        student = load_checkpoint(cfg.distill.student_init, dtype=dtype)
    if student.cfg.tasks != "both" or student.num_heads != 1:
        raise ConfigError("the student is a single-head joint model")
    return student


def train_student(cfg: Config, dataset, teacher: UQPredictor | None = None, student=None,
                  val_dataset=None, log_path=None, checkpoint_path=None) -> TrainResult:
    """Fine-tune a joint student on ground truth plus the teacher's uncertainty targets."""
    teacher = teacher if teacher is not None else load_teacher(cfg)
    student = student if student is not None else init_student(cfg)
    if teacher.num_classes != student.cfg.num_classes:
        raise ConfigError("teacher/student class-count mismatch")
    for m in teacher.models:
        m.eval()
        m.requires_grad_(False)
    on_epoch_end = None
    best = {"loss": float("inf"), "state": None}
    if cfg.distill.early_stopping and val_dataset is not None:
        val_batch = collate([val_dataset[i] for i in range(len(val_dataset))], dtype=model_dtype(student))
        joint = JointObjective(cfg.loss)

        def on_epoch_end(epoch, model):
            model.eval()
            with torch.no_grad():
                val = float(joint(model, val_batch).total)
            model.train()
            if val < best["loss"]:
                best.update(loss=val, state={k: v.clone() for k, v in model.state_dict().items()})
            return {"event": "validation", "val_loss": val}

    result = fit(student, dataset, cfg, DistillObjective(teacher, cfg), epochs=cfg.distill.epochs,
                 log_path=log_path, on_epoch_end=on_epoch_end)
    if best["state"] is not None:
        student.load_state_dict(best["state"])
    if checkpoint_path is not None:
        result.checkpoint = save_checkpoint(student, checkpoint_path, extra={"distilled": True})
    return result
