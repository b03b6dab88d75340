"""Hierarchical encoder, all-MLP fusion decoders and the baseline model assemblies.

One class, :class:`SegDepthFormer`, covers all three baselines through
``ModelConfig.tasks``: ``"seg"`` (segmentation only), ``"depth"`` (depth only)
and ``"both"`` (joint).  The uncertainty-distilled student uses the same
class, so its parameter count and call profile are identical to the joint
baseline by construction.

Bilinear interpolation uses the half-pixel-centre convention
(``align_corners=False``): output pixel ``i`` samples input coordinate
``(i + 0.5) / scale - 0.5``.
"""

from __future__ import annotations

import contextlib
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ConfigError, ModelConfig, to_dict, from_dict

EPS_VAR = 1e-6
CHECKPOINT_FORMAT = 1


class InvalidInputError(ValueError):
    pass


@dataclass
class SegmentationOutput:
    logits: torch.Tensor  # B x C x H/4 x W/4
    probs: torch.Tensor  # B x C x H x W


@dataclass
class DepthOutput:
    mu: torch.Tensor  # B x H x W
    s2: torch.Tensor  # B x H x W


@dataclass
class ModelOutput:
    seg: SegmentationOutput | None
    depth: DepthOutput | None


def softmax(logits: torch.Tensor, dim: int = 1) -> torch.Tensor:
    """Max-subtracted softmax along ``dim``; rejects NaN logits."""
    if torch.isnan(logits).any():
        raise InvalidInputError("NaN in logits")
    shifted = logits - logits.amax(dim=dim, keepdim=True)
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def upsample(x: torch.Tensor, size) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


def as_batch(image) -> torch.Tensor:
    """H x W x 3 array (or B x 3 x H x W tensor) -> validated B x 3 x H x W tensor."""
    if isinstance(image, np.ndarray):
        if image.ndim != 3 or image.shape[-1] != 3:
            raise InvalidInputError(f"expected H x W x 3 image, got {image.shape}")
        image = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None]
    if image.ndim != 4 or image.shape[1] != 3:
        raise InvalidInputError(f"expected B x 3 x H x W batch, got {tuple(image.shape)}")
    h, w = image.shape[-2:]
    if h < 4 or w < 4 or h % 4 or w % 4:
        raise InvalidInputError(f"image size {h}x{w} must be >= 4 and divisible by 4")
    if not torch.isfinite(image).all():
        raise InvalidInputError("non-finite pixel values")
    return image


class MCDropout(nn.Module):
    """Dropout whose activity can be forced on at inference (Monte Carlo dropout)."""

    def __init__(self, p: float):
        super().__init__()
        self.p = p
        self.active: bool | None = None  # None: follow self.training

    def forward(self, x):
        on = self.training if self.active is None else self.active
        if self.p == 0 or not on:
            return x
        return F.dropout(x, self.p, training=True)


class ChannelNorm(nn.Module):
    """LayerNorm over the channel axis of a B x C x H x W map."""

    def __init__(self, dim):
        super().__init__()
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class MixBlock(nn.Module):
    def __init__(self, dim, mlp_ratio, dropout):
        super().__init__()
        hidden = dim * mlp_ratio
        self.norm = ChannelNorm(dim)
        self.fc1 = nn.Conv2d(dim, hidden, 1)
        self.dwconv = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Conv2d(hidden, dim, 1)
        self.drop = MCDropout(dropout)

    def forward(self, x):
        return x + self.drop(self.fc2(self.act(self.dwconv(self.fc1(self.norm(x))))))


class Stage(nn.Module):
    def __init__(self, c_in, c_out, depth, stride, mlp_ratio, dropout):
        super().__init__()
        k = 7 if stride == 4 else 3
        # kernel k, padding k//2 gives ceil(H / stride) output rows
        self.embed = nn.Conv2d(c_in, c_out, k, stride=stride, padding=k // 2)
        self.embed_norm = ChannelNorm(c_out)
        self.blocks = nn.Sequential(*[MixBlock(c_out, mlp_ratio, dropout) for _ in range(depth)])
        self.norm = ChannelNorm(c_out)

    def forward(self, x):
        return self.norm(self.blocks(self.embed_norm(self.embed(x))))


class HierarchicalEncoder(nn.Module):
    """Four-stage encoder producing features at strides 4, 8, 16 and 32."""

    strides = (4, 8, 16, 32)

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        chans = (3,) + cfg.widths
        self.stages = nn.ModuleList(
            Stage(chans[i], chans[i + 1], cfg.depths[i], 4 if i == 0 else 2, cfg.mlp_ratio, cfg.dropout)
            for i in range(4)
        )
        self.calls = 0

    def forward(self, x):
        self.calls += 1
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class FusionDecoder(nn.Module):
    """All-MLP decoder: project every level, upsample to stride 4, fuse, predict."""

    def __init__(self, widths, embed_dim, out_channels, dropout):
        super().__init__()
        self.widths = tuple(widths)
        self.proj = nn.ModuleList(nn.Conv2d(w, embed_dim, 1) for w in widths)
        self.fuse = nn.Conv2d(len(widths) * embed_dim, embed_dim, 1)
        self.norm = ChannelNorm(embed_dim)
        self.act = nn.GELU()
        self.drop = MCDropout(dropout)
        self.out = nn.Conv2d(embed_dim, out_channels, 1)

    def forward(self, feats):
        if len(feats) != len(self.widths) or any(f.shape[1] != w for f, w in zip(feats, self.widths)):
            raise InvalidInputError(
                f"feature channels {[f.shape[1] for f in feats]} do not match decoder {list(self.widths)}")
        size = feats[0].shape[-2:]
        x = torch.cat([upsample(p(f), size) for p, f in zip(self.proj, feats)], dim=1)
        x = self.drop(self.act(self.norm(self.fuse(x))))
        return self.out(x)


def seg_output(logits: torch.Tensor, size) -> SegmentationOutput:
    return SegmentationOutput(logits=logits, probs=softmax(upsample(logits, size), dim=1))


def depth_output(raw: torch.Tensor, size) -> DepthOutput:
    # upsample raw channels first, then apply the activations
    raw = upsample(raw, size)
    mu = F.relu(raw[:, 0])
    s2 = F.softplus(raw[:, 1]).clamp_min(EPS_VAR)
    return DepthOutput(mu=mu, s2=s2)


class SegDepthFormer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = HierarchicalEncoder(cfg)
        heads = range(cfg.num_heads)
        self.seg_heads = nn.ModuleList(
            FusionDecoder(cfg.widths, cfg.embed_dim, cfg.num_classes, cfg.dropout) for _ in heads
        ) if cfg.has_seg else None
        self.depth_heads = nn.ModuleList(
            FusionDecoder(cfg.widths, cfg.embed_dim, 2, cfg.dropout) for _ in heads
        ) if cfg.has_depth else None
        if self.depth_heads is not None:
            for head in self.depth_heads:
                with torch.no_grad():
                    head.out.bias[0] = 1.0  # keep the ReLU mean channel alive at init

    @property
    def num_heads(self) -> int:
        return self.cfg.num_heads

    def encode(self, images, stochastic: bool | None = None):
        images = as_batch(images)
        with dropout_mode(self, stochastic):
            return self.encoder(images)

    def decode_segmentation(self, feats, head: int = 0, size=None, stochastic: bool | None = None):
        if self.seg_heads is None:
            raise ConfigError("segmentation head disabled")
        size = size or _full_size(feats)
        with dropout_mode(self, stochastic):
            return seg_output(self.seg_heads[head](feats), size)

    def decode_depth(self, feats, head: int = 0, size=None, stochastic: bool | None = None):
        if self.depth_heads is None:
            raise ConfigError("depth head disabled")
        size = size or _full_size(feats)
        with dropout_mode(self, stochastic):
            return depth_output(self.depth_heads[head](feats), size)

    def forward(self, images, head: int = 0, stochastic: bool | None = None) -> ModelOutput:
        images = as_batch(images)
        size = images.shape[-2:]
        with dropout_mode(self, stochastic):
            feats = self.encoder(images)
            seg = seg_output(self.seg_heads[head](feats), size) if self.seg_heads is not None else None
            depth = depth_output(self.depth_heads[head](feats), size) if self.depth_heads is not None else None
        return ModelOutput(seg=seg, depth=depth)

    def forward_joint(self, images, head: int = 0, stochastic: bool | None = None):
        if self.cfg.tasks != "both":
            raise ConfigError("forward_joint needs both heads enabled")
        out = self(images, head=head, stochastic=stochastic)
        return out.seg, out.depth


def _full_size(feats):
    h, w = feats[0].shape[-2:]
    return (4 * h, 4 * w)


@contextlib.contextmanager
def dropout_mode(model: nn.Module, stochastic: bool | None):
    """Force every MCDropout in ``model`` on (True) or off (False); None leaves train-mode control."""
    if stochastic is None:
        yield
        return
    mods = [m for m in model.modules() if isinstance(m, MCDropout)]
    previous = [m.active for m in mods]
    for m in mods:
        m.active = stochastic
    try:
        yield
    finally:
        for m, p in zip(mods, previous):
            m.active = p


def build_model(cfg: ModelConfig, seed: int | None = None, dtype=torch.float32) -> SegDepthFormer:
    if seed is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            model = SegDepthFormer(cfg)
    else:
        model = SegDepthFormer(cfg)
    return model.to(dtype)


def count_parameters(model) -> int:
    """Trainable scalar parameters; a list of models counts every member."""
    if isinstance(model, (list, tuple)):
        return sum(count_parameters(m) for m in model)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def call_profile(model: nn.Module, images) -> Counter:
    """Count module invocations by class name during one forward pass."""
    counts: Counter = Counter()
    hooks = [m.register_forward_hook(lambda mod, i, o: counts.update([type(mod).__name__]))
             for m in model.modules()]
    try:
        with torch.no_grad():
            model(images)
    finally:
        for h in hooks:
            h.remove()
    return counts


def save_checkpoint(model: SegDepthFormer, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format_version": CHECKPOINT_FORMAT,
        "model_config": to_dict(model.cfg),
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }, path)
    return path


def load_checkpoint(path, dtype=None) -> SegDepthFormer:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format_version") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {blob.get('format_version')!r}")
    cfg = from_dict(ModelConfig, blob["model_config"])
    model = SegDepthFormer(cfg)
    model.load_state_dict(blob["state_dict"])
    model = model.to(dtype or getattr(torch, blob.get("dtype", "float32")))
    model.eval()
    return model
