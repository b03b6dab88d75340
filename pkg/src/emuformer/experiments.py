"""Desk-scale experiments on the synthetic scenes: deep-ensemble teacher,
distilled student, un-distilled control, and the depth-loss ablation."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .config import AugmentConfig, Config, DistillConfig, LossConfig, LossWeights, MetricsConfig, OptimConfig
from .data import collate, make_synthetic_dataset
from .distill import train_student
from .metrics import MetricsReport
from .train import TrainResult, clone_model, evaluate, member_seed, train, train_ensemble
from .uq import UQPredictor, aggregate_depth

log = logging.getLogger(__name__)

ABLATION_COLUMNS = (
    ("mIoU", "seg", "miou"), ("ECE", "seg", "ece"), ("p(acc/cer)", "seg", "p_acc_cer"),
    ("p(unc/inacc)", "seg", "p_unc_inacc"), ("PAvPU", "seg", "pavpu"),
    ("RMSE", "depth", "rmse"), ("p(acc/cer)", "depth", "p_acc_cer"),
    ("p(unc/inacc)", "depth", "p_unc_inacc"), ("PAvPU", "depth", "pavpu"),
)


@dataclass
class ToySetup:
    n_train: int = 128
    n_val: int = 48
    members: int = 10
    teacher_epochs: int = 25
    # the student init is trained for a shorter budget so fine-tuning still has room to descend
    pretrain_epochs: int = 12
    distill_epochs: int = 20
    base_lr: float = 3e-3
    distill_lr: float = 1e-3
    batch_size: int = 8
    # narrower than the [0.5, 2.0] default: the tiny encoder cannot infer a 4x depth rescale
    scale_range: tuple[float, float] = (0.75, 1.5)
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def config(self, **loss) -> Config:
        cfg = Config(seed=self.seed,
                     augment=AugmentConfig(scale_min=self.scale_range[0], scale_max=self.scale_range[1]),
                     optimizer=OptimConfig(base_lr=self.base_lr, epochs=self.teacher_epochs,
                                           batch_size=self.batch_size))
        if loss:
            cfg = replace(cfg, loss=LossConfig(**loss))
        return cfg

    def distill_config(self, weights: LossWeights | None = None, **loss) -> Config:
        cfg = self.config(**loss)
        return replace(cfg, seed=self.seed + 7,
                       optimizer=replace(cfg.optimizer, base_lr=self.distill_lr, epochs=self.distill_epochs),
                       distill=DistillConfig(epochs=self.distill_epochs, weights=weights or self.weights))


@dataclass
class ToyResults:
    train_set: list
    val_set: list
    members: list[TrainResult]
    teacher: UQPredictor
    member_reports: list[MetricsReport]
    teacher_report: MetricsReport
    pretrained: TrainResult
    student: TrainResult
    control: TrainResult
    student_corr: float
    control_corr: float
    timings: dict


def variance_correlation(model, teacher: UQPredictor, dataset) -> float:
    """Pearson correlation between a model's s^2 and the teacher's predictive variance (no jitter)."""
    batch = collate([dataset[i] for i in range(len(dataset))], dtype=next(model.parameters()).dtype)
    with torch.no_grad():
        s2 = model(batch.images, stochastic=False).depth.s2
        _, sigma2 = aggregate_depth(teacher.sample(batch.images))
    return float(np.corrcoef(s2.flatten().double().numpy(), sigma2.flatten().double().numpy())[0, 1])


def moving_average(values, window: int = 10) -> np.ndarray:
    values = np.asarray(values, float)
    if len(values) < window:
        return values.copy()
    return np.convolve(values, np.ones(window) / window, mode="valid")


def run_toy(setup: ToySetup = ToySetup(), metrics_cfg: MetricsConfig = MetricsConfig()) -> ToyResults:
    timings = {}
    train_set = make_synthetic_dataset(setup.n_train, seed=setup.seed)
    val_set = make_synthetic_dataset(setup.n_val, seed=setup.seed + 10_000)
    cfg = setup.config()

    t0 = time.perf_counter()
    members = train_ensemble(cfg, train_set, members=setup.members)
    timings["ensemble_s"] = time.perf_counter() - t0
    teacher = UQPredictor([m.model for m in members], "de")
    member_reports = [evaluate(UQPredictor([m.model]), val_set, metrics_cfg) for m in members]
    teacher_report = evaluate(teacher, val_set, metrics_cfg)

    # a separately trained joint model initialises both the student and its control
    pretrained = train(replace(cfg, seed=member_seed(cfg.seed, setup.members),
                               optimizer=replace(cfg.optimizer, epochs=setup.pretrain_epochs)), train_set)
    dcfg = setup.distill_config()
    t0 = time.perf_counter()
    student = train_student(dcfg, train_set, teacher=teacher, student=clone_model(pretrained.model))
    timings["distill_s"] = time.perf_counter() - t0
    control = train(dcfg, train_set, model=clone_model(pretrained.model))
    return ToyResults(
        train_set=train_set, val_set=val_set, members=members, teacher=teacher,
        member_reports=member_reports, teacher_report=teacher_report, pretrained=pretrained,
        student=student, control=control,
        student_corr=variance_correlation(student.model, teacher, val_set),
        control_corr=variance_correlation(control.model, teacher, val_set),
        timings=timings,
    )


def ablation_table(reports: dict[str, MetricsReport]) -> list[dict]:
    rows = []
    for name, rep in reports.items():
        d = rep.to_dict()
        row = {"loss": name}
        for label, task, key in ABLATION_COLUMNS:
            row[f"{task}.{label}"] = d[task][key]
        rows.append(row)
    return rows


def format_table(rows: list[dict]) -> str:
    headers = list(rows[0])
    fmt = lambda v: v if isinstance(v, str) else ("-" if v is None else f"{v:.3f}")  # noqa: E731
    lines = [" | ".join(headers), " | ".join("---" for _ in headers)]
    lines += [" | ".join(fmt(r[h]) for h in headers) for r in rows]
    return "\n".join(lines)


def run_depth_loss_ablation(setup: ToySetup, teacher: UQPredictor, train_set, val_set, init_model,
                            losses=("mse", "huber", "gnll"), metrics_cfg: MetricsConfig = MetricsConfig()):
    """Distil one student per depth loss from the same init and teacher; returns table rows and reports."""
    reports = {}
    for kind in losses:
        cfg = setup.distill_config(depth_loss=kind)
        res = train_student(cfg, train_set, teacher=teacher, student=clone_model(init_model))
        reports[{"mse": "MSE", "huber": "Huber", "gnll": "GNLL"}[kind]] = evaluate(
            UQPredictor([res.model]), val_set, metrics_cfg)
    return ablation_table(reports), reports
