"""Sampling-based uncertainty: MC dropout, deep sub-ensembles, deep ensembles.

Each method turns an image batch into a :class:`SampleSet` of ``T`` stochastic
predictions (leading axis). :func:`aggregate` reduces it to the mean
prediction and the predictive uncertainty of both tasks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .config import ConfigError, UQConfig
from .losses import predictive_entropy
from .model import SegDepthFormer, as_batch, count_parameters

METHODS = ("SINGLE", "MCD", "DSE", "DE")


@dataclass(frozen=True)
class SampleSet:
    method: str
    seg_probs: torch.Tensor | None = None  # T x B x C x H x W
    depth_mu: torch.Tensor | None = None  # T x B x H x W
    depth_s2: torch.Tensor | None = None  # T x B x H x W

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method tag {self.method!r}")
        if self.seg_probs is None and self.depth_mu is None:
            raise ValueError("sample set holds neither task")
        if (self.depth_mu is None) != (self.depth_s2 is None):
            raise ValueError("depth mean and variance must come together")
        if self.T < 1:
            raise ValueError("need at least one sample")

    @property
    def T(self) -> int:
        ref = self.seg_probs if self.seg_probs is not None else self.depth_mu
        return ref.shape[0]


@dataclass
class AggregatedPrediction:
    seg_mean_probs: torch.Tensor | None = None
    seg_entropy: torch.Tensor | None = None
    depth_mean: torch.Tensor | None = None
    depth_pred_var: torch.Tensor | None = None


def aggregate_segmentation(samples: SampleSet):
    """Mean softmax over samples and the entropy of that mean."""
    if samples.seg_probs is None:
        raise ValueError("no segmentation samples")
    mean_probs = samples.seg_probs.mean(dim=0)
    return mean_probs, predictive_entropy(mean_probs, dim=-3)


def aggregate_depth(samples: SampleSet):
    """Mean depth and predictive variance: mean aleatoric s^2 plus spread of the means (divisor T)."""
    if samples.depth_mu is None:
        raise ValueError("no depth samples")
    mu = F.relu(samples.depth_mu)  # idempotent on decoder output
    mean_depth = mu.mean(dim=0)
    spread = ((mu - mean_depth) ** 2).mean(dim=0)
    return mean_depth, samples.depth_s2.mean(dim=0) + spread


def aggregate(samples: SampleSet) -> AggregatedPrediction:
    out = AggregatedPrediction()
    if samples.seg_probs is not None:
        out.seg_mean_probs, out.seg_entropy = aggregate_segmentation(samples)
    if samples.depth_mu is not None:
        out.depth_mean, out.depth_pred_var = aggregate_depth(samples)
    return out


def _stack(outputs, method) -> SampleSet:
    seg = [o.seg.probs for o in outputs if o.seg is not None]
    dep = [o.depth for o in outputs if o.depth is not None]
    return SampleSet(
        method=method,
        seg_probs=torch.stack(seg) if seg else None,
        depth_mu=torch.stack([d.mu for d in dep]) if dep else None,
        depth_s2=torch.stack([d.s2 for d in dep]) if dep else None,
    )


def sample_seeds(seed: int, n: int) -> list[int]:
    """Independent per-sample seeds derived from one base seed."""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


@torch.no_grad()
def single_forward(model: SegDepthFormer, images) -> SampleSet:
    return _stack([model(as_batch(images), stochastic=False)], "SINGLE")


@torch.no_grad()
def mcd_sample(model: SegDepthFormer, images, T: int = 10, seed: int = 0) -> SampleSet:
    if model.cfg.dropout <= 0:
        raise ConfigError("MC dropout needs a model built with dropout > 0")
    if T < 1:
        raise ValueError("T must be >= 1")
    images = as_batch(images)
    outputs = []
    with torch.random.fork_rng(devices=[]):
        for s in sample_seeds(seed, T):
            torch.manual_seed(s)
            outputs.append(model(images, stochastic=True))
    return _stack(outputs, "MCD")


@torch.no_grad()
def dse_forward(model: SegDepthFormer, images) -> SampleSet:
    if model.num_heads < 2:
        raise ConfigError("a deep sub-ensemble needs at least 2 decoder heads")
    images = as_batch(images)
    size = images.shape[-2:]
    feats = model.encode(images, stochastic=False)
    seg = depth = None
    if model.seg_heads is not None:
        seg = torch.stack([model.decode_segmentation(feats, h, size, stochastic=False).probs
                           for h in range(model.num_heads)])
    if model.depth_heads is not None:
        outs = [model.decode_depth(feats, h, size, stochastic=False) for h in range(model.num_heads)]
        depth = (torch.stack([o.mu for o in outs]), torch.stack([o.s2 for o in outs]))
    return SampleSet("DSE", seg_probs=seg,
                     depth_mu=None if depth is None else depth[0],
                     depth_s2=None if depth is None else depth[1])


@torch.no_grad()
def de_forward(members: list[SegDepthFormer], images) -> SampleSet:
    if len(members) < 2:
        raise ConfigError("a deep ensemble needs at least 2 members")
    ref = members[0].cfg
    if any(m.cfg != ref for m in members[1:]):
        raise ConfigError("ensemble members have heterogeneous configs")
    images = as_batch(images)
    return _stack([m(images, stochastic=False) for m in members], "DE")


@dataclass
class UQPredictor:
    """Bundle of trained model(s) plus the rule that samples predictions from them."""

    models: list[SegDepthFormer]
    method: str = "none"  # none | mcd | dse | de
    samples: int = 10
    seed: int = 0
    forward_calls: int = field(default=0, init=False)

    def __post_init__(self):
        if self.method not in ("none", "mcd", "dse", "de"):
            raise ConfigError(f"unknown uq method {self.method!r}")
        if self.method != "de" and len(self.models) != 1:
            raise ConfigError(f"method {self.method!r} takes exactly one model")

    @property
    def cfg(self):
        return self.models[0].cfg

    @property
    def num_classes(self) -> int:
        return self.cfg.num_classes

    def num_parameters(self) -> int:
        return count_parameters(self.models)

    def sample(self, images, key: int = 0) -> SampleSet:
        """Draw the sample set for a batch; ``key`` decorrelates MC dropout across batches."""
        self.forward_calls += 1
        m = self.models[0]
        if self.method == "none":
            return single_forward(m, images)
        if self.method == "mcd":
            return mcd_sample(m, images, self.samples, seed=sample_seeds(self.seed + key, 1)[0])
        if self.method == "dse":
            return dse_forward(m, images)
        return de_forward(self.models, images)

    def predict(self, images, key: int = 0) -> AggregatedPrediction:
        return aggregate(self.sample(images, key))


def make_predictor(models, uq: UQConfig) -> UQPredictor:
    models = list(models) if isinstance(models, (list, tuple)) else [models]
    for m in models:
        m.eval()
    return UQPredictor(models=models, method=uq.method, samples=uq.samples, seed=uq.seed)
