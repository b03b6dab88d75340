"""Joint segmentation and depth estimation with sampling-based uncertainty
and single-pass uncertainty distillation."""

from .config import Config, load_config
from .data import DatasetSample, load_dataset, make_synthetic_dataset
from .distill import train_student
from .losses import (cross_entropy, gnll, huber, kl_distill, mse, predictive_entropy,
                     rmsle_uncertainty)
from .metrics import MetricsReport
from .model import SegDepthFormer, build_model, load_checkpoint, save_checkpoint
from .train import benchmark, evaluate, poly_lr, train, train_ensemble
from .uq import UQPredictor, aggregate

__all__ = [
    "Config", "load_config", "DatasetSample", "load_dataset", "make_synthetic_dataset",
    "train_student", "cross_entropy", "gnll", "huber", "kl_distill", "mse", "predictive_entropy",
    "rmsle_uncertainty", "MetricsReport", "SegDepthFormer", "build_model", "load_checkpoint",
    "save_checkpoint", "benchmark", "evaluate", "poly_lr", "train", "train_ensemble",
    "UQPredictor", "aggregate",
]
