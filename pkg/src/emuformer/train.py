"""Optimisation schedule, the shared training loop, evaluation and timing."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .config import Config, LossConfig, LossWeights, MetricsConfig
from .data import augment, collate, sample_rng
from .losses import cross_entropy, depth_loss, depth_mask, emu_total, seg_mask
from .metrics import MetricsAccumulator, MetricsReport
from .model import SegDepthFormer, build_model, count_parameters, save_checkpoint

log = logging.getLogger(__name__)

SHUFFLE_STREAM, AUGMENT_STREAM, HEAD_STREAM, JITTER_STREAM = 0, 1, 2, 3


class TrainingDiverged(RuntimeError):
    pass


def poly_lr(iteration: int, total_iterations: int, base_lr: float, power: float = 0.9) -> float:
    if total_iterations <= 0:
        raise ValueError("total_iterations must be > 0")
    if not 0 <= iteration <= total_iterations:
        raise ValueError(f"iteration {iteration} outside [0, {total_iterations}]")
    return base_lr * (1.0 - iteration / total_iterations) ** power


@dataclass
class TrainResult:
    model: SegDepthFormer
    log: list = field(default_factory=list)
    head_updates: list = field(default_factory=list)
    checkpoint: Path | None = None

    def epoch_losses(self, key: str = "total") -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for rec in self.log:
            if "step" in rec:
                by_epoch.setdefault(rec["epoch"], []).append(rec[key])
        return [float(np.mean(v)) for _, v in sorted(by_epoch.items())]


def model_dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype


class JointObjective:
    """CE + w1 * depth loss, with whichever heads the model has."""

    def __init__(self, loss_cfg: LossConfig):
        self.loss_cfg = loss_cfg

    def __call__(self, model, batch, head=0, epoch=0):
        out = model(batch.images, head=head)
        zero = batch.images.new_zeros(())
        ce = cross_entropy(out.seg.probs, batch.labels, seg_mask(batch.labels)) if out.seg is not None else zero
        dl = zero
        if out.depth is not None:
            dl = depth_loss(self.loss_cfg.depth_loss, out.depth.mu, out.depth.s2, batch.depth,
                            depth_mask(batch.depth), self.loss_cfg.huber_delta)
        return emu_total(ce, dl, zero, zero, LossWeights(self.loss_cfg.w1, 0.0, 0.0))


def _select_head(cfg: Config, step: int, num_heads: int) -> int:
    if num_heads == 1:
        return 0
    if cfg.uq.head_selection == "random":
        return int(sample_rng(cfg.seed, step, HEAD_STREAM).integers(num_heads))
    return step % num_heads


def make_batch(dataset, indices, cfg: Config, epoch: int, dtype):
    samples = []
    for i in indices:
        s = dataset[int(i)]
        if cfg.augment.enabled:
            s = augment(s, cfg.augment, sample_rng(cfg.seed, epoch, int(i), AUGMENT_STREAM))
        samples.append(s)
    return collate(samples, indices, dtype)


def fit(model: SegDepthFormer, dataset, cfg: Config, objective, epochs: int | None = None,
        log_path=None, on_epoch_end=None) -> TrainResult:
    """Shared loop: seeded shuffle and augmentation, AdamW, per-step polynomial LR."""
    if cfg.threads:
        torch.set_num_threads(cfg.threads)
    opt_cfg = cfg.optimizer
    epochs = epochs or opt_cfg.epochs
    dtype = model_dtype(model)
    n = len(dataset)
    per_epoch = math.ceil(n / opt_cfg.batch_size)
    total = epochs * per_epoch
    if opt_cfg.max_steps is not None:
        total = min(total, opt_cfg.max_steps)
    optimizer = torch.optim.AdamW(model.parameters(), lr=opt_cfg.base_lr, betas=opt_cfg.betas,
                                  eps=opt_cfg.eps, weight_decay=opt_cfg.weight_decay)
    result = TrainResult(model=model, head_updates=[0] * model.num_heads)
    sink = open(log_path, "a") if log_path else None
    torch.manual_seed(cfg.seed)
    model.train()
    step = 0
    try:
        for epoch in range(epochs):
            order = sample_rng(cfg.seed, epoch, SHUFFLE_STREAM).permutation(n)
            for b in range(per_epoch):
                if step >= total:
                    break
                batch = make_batch(dataset, order[b * opt_cfg.batch_size:(b + 1) * opt_cfg.batch_size],
                                   cfg, epoch, dtype)
                head = _select_head(cfg, step, model.num_heads)
                lr = poly_lr(step, total, opt_cfg.base_lr, opt_cfg.power)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                optimizer.zero_grad(set_to_none=True)
                parts = objective(model, batch, head=head, epoch=epoch)
                record = {"step": step, "epoch": epoch, "lr": lr, "head": head, **parts.as_floats()}
                if not math.isfinite(record["total"]):
                    record["event"] = "diverged"
                    if sink:
                        sink.write(json.dumps(record) + "\n")
                    raise TrainingDiverged(f"non-finite loss at step {step}: {record}")
                parts.total.backward()
                optimizer.step()
                result.head_updates[head] += 1
                result.log.append(record)
                if sink:
                    sink.write(json.dumps(record) + "\n")
                step += 1
            if on_epoch_end is not None:
                extra = on_epoch_end(epoch, model)
                if extra:
                    result.log.append({"epoch": epoch, **extra})
            if step >= total:
                break
    finally:
        if sink:
            sink.close()
    model.eval()
    return result


def build_for(cfg: Config, seed: int | None = None) -> SegDepthFormer:
    mcfg = cfg.model
    if cfg.uq.dropout is not None:
        mcfg = replace(mcfg, dropout=cfg.uq.dropout)
    return build_model(mcfg, seed=cfg.seed if seed is None else seed, dtype=getattr(torch, cfg.dtype))


def train(cfg: Config, dataset, log_path=None, checkpoint_path=None, model=None) -> TrainResult:
    """Train one baseline model (or a deep sub-ensemble when ``model.num_heads > 1``)."""
    model = model if model is not None else build_for(cfg)
    result = fit(model, dataset, cfg, JointObjective(cfg.loss), log_path=log_path)
    if checkpoint_path is not None:
        result.checkpoint = save_checkpoint(model, checkpoint_path, extra={"seed": cfg.seed})
    return result


def member_seed(base: int, m: int) -> int:
    return base + 1009 * m


def train_ensemble(cfg: Config, dataset, members: int | None = None, out_dir=None) -> list[TrainResult]:
    """Independent members differing in init, augmentation and shuffling through distinct seeds."""
    members = members or cfg.uq.members
    results = []
    for m in range(members):
        mcfg = replace(cfg, seed=member_seed(cfg.seed, m))
        ckpt = log_path = None
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            ckpt, log_path = out / f"member_{m:02d}.pt", out / f"member_{m:02d}.jsonl"
        results.append(train(mcfg, dataset, log_path=log_path, checkpoint_path=ckpt))
    return results


def evaluate(predictor, dataset, metrics_cfg: MetricsConfig = MetricsConfig(), batch_size: int = 16,
             ignore_index: int = 255) -> MetricsReport:
    """Aggregate the predictor's samples per image and compute the full metric suite."""
    cfg = predictor.cfg
    acc = MetricsAccumulator(cfg.num_classes if cfg.has_seg else None, metrics_cfg.ece_bins,
                             metrics_cfg.patch, metrics_cfg.eps_depth, ignore_index)
    dtype = model_dtype(predictor.models[0])
    for start in range(0, len(dataset), batch_size):
        idx = list(range(start, min(start + batch_size, len(dataset))))
        samples = [dataset[i] for i in idx]
        if cfg.has_seg:
            for s in samples:
                lab = s.seg_labels[s.seg_labels != ignore_index]
                if lab.size and lab.max() >= cfg.num_classes:
                    raise ValueError(f"label {lab.max()} exceeds model class count {cfg.num_classes}")
        batch = collate(samples, idx, dtype)
        pred = predictor.predict(batch.images, key=start)
        for j, (i, s) in enumerate(zip(idx, samples)):
            if pred.seg_mean_probs is not None:
                acc.update_seg(i, pred.seg_mean_probs[j].double().numpy(),
                               pred.seg_entropy[j].double().numpy(), s.seg_labels)
            if pred.depth_mean is not None:
                acc.update_depth(i, pred.depth_mean[j].double().numpy(),
                                 pred.depth_pred_var[j].double().numpy(), s.depth)
    report = acc.report()
    report.params = predictor.num_parameters()
    return report


def benchmark(predictor, input_shape=(1, 3, 32, 32), warmup: int = 3, iters: int = 10) -> dict:
    """Wall-clock milliseconds per predict call, excluding warmup iterations."""
    if iters < 10:
        raise ValueError("iters must be >= 10")
    x = torch.rand(input_shape, generator=torch.Generator().manual_seed(0)).to(model_dtype(predictor.models[0]))
    for _ in range(warmup):
        predictor.predict(x)
    times = []
    for i in range(iters):
        t0 = time.perf_counter()
        predictor.predict(x, key=i)
        times.append((time.perf_counter() - t0) * 1e3)
    return {
        "mean_ms": float(np.mean(times)),
        "std_ms": float(np.std(times)),
        "params": predictor.num_parameters(),
        "conditions": {"input_shape": list(input_shape), "warmup": warmup, "iters": iters,
                       "threads": torch.get_num_threads(), "method": predictor.method,
                       "samples": predictor.samples if predictor.method == "mcd" else len(predictor.models)},
    }


def clone_model(model: SegDepthFormer) -> SegDepthFormer:
    return copy.deepcopy(model)
