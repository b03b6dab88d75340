"""Datasets, the procedural toy scene generator and geometric augmentation."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

from .config import AugmentConfig
from .losses import IGNORE_INDEX

IMAGE_EXTS = (".png", ".jpg", ".jpeg")


class DatasetError(RuntimeError):
    pass


@dataclass
class DatasetSample:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    seg_labels: np.ndarray  # H x W int64, IGNORE_INDEX for unlabeled pixels
    depth: np.ndarray  # H x W float32, <= 0 marks invalid pixels

    def __post_init__(self):
        h, w = self.seg_labels.shape
        if self.image.shape != (h, w, 3) or self.depth.shape != (h, w):
            raise DatasetError(
                f"maps not aligned: image {self.image.shape}, labels {self.seg_labels.shape}, depth {self.depth.shape}")


def sample_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for (seed, epoch, index, stream, ...) so worker layout never matters."""
    return np.random.default_rng([int(seed), *[int(k) for k in keys]])


# ---------------------------------------------------------------------------
# synthetic scenes

_PALETTE = np.array([
    [0.45, 0.40, 0.35],  # background ground plane
    [0.85, 0.20, 0.20],
    [0.20, 0.70, 0.25],
    [0.20, 0.30, 0.85],
    [0.85, 0.80, 0.20],
    [0.70, 0.25, 0.75],
    [0.20, 0.75, 0.80],
    [0.95, 0.55, 0.15],
])


def _shape_mask(kind, yy, xx, cy, cx, r):
    if kind == 0:
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
    if kind == 1:
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    # upward triangle
    return (yy <= cy + r) & (yy >= cy - r) & (np.abs(xx - cx) <= (yy - (cy - r)) / 2)


def synthetic_scene(rng: np.random.Generator, size=(32, 32), num_classes: int = 4) -> DatasetSample:
    h, w = size
    scale = min(h, w) / 32.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # ground plane: far at the top row, near at the bottom row
    depth = 9.0 - 6.0 * (yy + 0.5) / h
    labels = np.zeros((h, w), dtype=np.int64)
    base = _PALETTE[0] + rng.normal(0, 0.04, 3)
    # stripe period shrinks with distance (period ~ 1/depth), consistent under rescaling
    period = 20.0 * scale / depth
    stripes = 0.12 * np.sin(2 * np.pi * xx / period + rng.uniform(0, 2 * np.pi))
    image = base[None, None, :] + stripes[..., None]

    objects = [(rng.uniform(1.2, 4.0), int(rng.integers(1, num_classes))) for _ in range(rng.integers(1, 4))]
    for d, cls in sorted(objects, reverse=True):  # far to near
        r = 14.0 * scale / d * rng.uniform(0.9, 1.1)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        m = _shape_mask((cls - 1) % 3, yy, xx, cy, cx, r)
        labels[m] = cls
        depth[m] = d
        color = np.clip(_PALETTE[cls % len(_PALETTE)] + rng.normal(0, 0.05, 3), 0, 1)
        image[m] = color * (1.1 - 0.1 * d)  # nearer objects appear brighter

    image = image + rng.normal(0, 0.03, image.shape)
    depth = depth.astype(np.float32)
    if rng.random() < 0.3:  # sensor dropout band: unlabeled and no depth
        row = int(rng.integers(0, h))
        labels[row, :] = IGNORE_INDEX
        depth[row, :] = 0.0
    return DatasetSample(np.clip(image, 0, 1).astype(np.float32), labels, depth)


def make_synthetic_dataset(n: int, seed: int = 0, size=(32, 32), num_classes: int = 4) -> list[DatasetSample]:
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 2 <= num_classes <= len(_PALETTE):
        raise ValueError(f"num_classes must lie in [2, {len(_PALETTE)}]")
    return [synthetic_scene(sample_rng(seed, i), size, num_classes) for i in range(n)]


# ---------------------------------------------------------------------------
# on-disk paired directories: images/, labels/, depth/ with matching stems

def _index(directory: Path, exts) -> dict[str, Path]:
    if not directory.is_dir():
        raise DatasetError(f"missing directory {directory}")
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in exts}


class PairedDirDataset(Sequence):
    """Lazy dataset over ``root/{images,labels,depth}``; depth as 16-bit PNG / ``depth_scale`` or ``.npy`` floats."""

    def __init__(self, root, depth_scale: float = 1000.0):
        root = Path(root)
        self.depth_scale = depth_scale
        images = _index(root / "images", IMAGE_EXTS)
        labels = _index(root / "labels", (".png",))
        depth = _index(root / "depth", (".png", ".npy"))
        stems = set(images) | set(labels) | set(depth)
        missing = []
        for stem in sorted(stems):
            for name, table in (("images", images), ("labels", labels), ("depth", depth)):
                if stem not in table:
                    missing.append(f"{stem} (no {name} file)")
        if missing:
            raise DatasetError("unmatched files: " + ", ".join(missing))
        self.stems = sorted(stems)
        self._files = [(images[s], labels[s], depth[s]) for s in self.stems]

    def __len__(self):
        return len(self._files)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        img_p, lab_p, dep_p = self._files[i]
        try:
            image = np.asarray(PILImage.open(img_p).convert("RGB"), dtype=np.float32) / 255.0
            labels = np.asarray(PILImage.open(lab_p), dtype=np.int64)
            if dep_p.suffix == ".npy":
                depth = np.load(dep_p).astype(np.float32)
            else:
                depth = np.asarray(PILImage.open(dep_p), dtype=np.float32) / self.depth_scale
        except Exception as exc:  # noqa: BLE001 - re-raised with the stem attached
            raise DatasetError(f"{self.stems[i]}: cannot read ({exc})") from exc
        if labels.ndim != 2:
            raise DatasetError(f"{self.stems[i]}: labels must be a single-channel index map")
        return DatasetSample(image, labels, depth)


def load_dataset(root, depth_scale: float = 1000.0) -> PairedDirDataset:
    return PairedDirDataset(root, depth_scale)


def write_dataset(samples, root, depth_scale: float = 1000.0) -> Path:
    root = Path(root)
    for sub in ("images", "labels", "depth"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        stem = f"{i:05d}"
        PILImage.fromarray(np.round(s.image * 255).astype(np.uint8)).save(root / "images" / f"{stem}.png")
        PILImage.fromarray(s.seg_labels.astype(np.uint8)).save(root / "labels" / f"{stem}.png")
        d = np.clip(np.round(np.where(s.depth > 0, s.depth, 0) * depth_scale), 0, 65535).astype(np.uint16)
        PILImage.fromarray(d).save(root / "depth" / f"{stem}.png")
    return root


# ---------------------------------------------------------------------------
# augmentation

@dataclass
class AugmentParams:
    scale: float
    top: int
    left: int
    flip: bool


def _resize(sample: DatasetSample, size, rescale_depth: bool, scale: float) -> DatasetSample:
    img = torch.from_numpy(sample.image.transpose(2, 0, 1)[None].astype(np.float32))
    img = F.interpolate(img, size=size, mode="bilinear", align_corners=False)[0].numpy().transpose(1, 2, 0)
    lab = torch.from_numpy(sample.seg_labels[None, None].astype(np.float32))
    lab = F.interpolate(lab, size=size, mode="nearest-exact")[0, 0].numpy().astype(np.int64)
    valid = np.isfinite(sample.depth) & (sample.depth > 0)
    num = torch.from_numpy(np.where(valid, sample.depth, 0)[None, None].astype(np.float32))
    den = torch.from_numpy(valid[None, None].astype(np.float32))
    num = F.interpolate(num, size=size, mode="bilinear", align_corners=False)[0, 0].numpy()
    den = F.interpolate(den, size=size, mode="bilinear", align_corners=False)[0, 0].numpy()
    # normalized interpolation: only valid neighbours contribute
    dep = np.where(den >= 0.5, num / np.maximum(den, 1e-12), 0.0)
    if rescale_depth:
        dep = dep / scale
    return DatasetSample(np.clip(img, 0, 1).astype(np.float32), lab, dep.astype(np.float32))


def _pad_to(sample: DatasetSample, h: int, w: int) -> DatasetSample:
    ph, pw = max(0, h - sample.seg_labels.shape[0]), max(0, w - sample.seg_labels.shape[1])
    if not (ph or pw):
        return sample
    return DatasetSample(
        np.pad(sample.image, ((0, ph), (0, pw), (0, 0))),
        np.pad(sample.seg_labels, ((0, ph), (0, pw)), constant_values=IGNORE_INDEX),
        np.pad(sample.depth, ((0, ph), (0, pw))),
    )


def augment(sample: DatasetSample, cfg: AugmentConfig, rng: np.random.Generator, return_params: bool = False):
    """Random scale, pad-if-needed, random crop and horizontal flip, applied identically to all maps."""
    scale = float(rng.uniform(cfg.scale_min, cfg.scale_max))
    h, w = sample.seg_labels.shape
    size = (max(1, round(h * scale)), max(1, round(w * scale)))
    if size != (h, w):
        sample = _resize(sample, size, cfg.rescale_depth, scale)
    sample = _pad_to(sample, cfg.crop_h, cfg.crop_w)
    h, w = sample.seg_labels.shape
    top = int(rng.integers(0, h - cfg.crop_h + 1))
    left = int(rng.integers(0, w - cfg.crop_w + 1))
    flip = bool(rng.random() < cfg.hflip_prob)
    window = (slice(top, top + cfg.crop_h), slice(left, left + cfg.crop_w))
    image, labels, depth = sample.image[window], sample.seg_labels[window], sample.depth[window]
    if flip:
        image, labels, depth = image[:, ::-1], labels[:, ::-1], depth[:, ::-1]
    out = DatasetSample(np.ascontiguousarray(image), np.ascontiguousarray(labels), np.ascontiguousarray(depth))
    return (out, AugmentParams(scale, top, left, flip)) if return_params else out


def hflip(sample: DatasetSample) -> DatasetSample:
    return DatasetSample(np.ascontiguousarray(sample.image[:, ::-1]),
                         np.ascontiguousarray(sample.seg_labels[:, ::-1]),
                         np.ascontiguousarray(sample.depth[:, ::-1]))


@dataclass
class Batch:
    images: torch.Tensor  # B x 3 x H x W
    labels: torch.Tensor  # B x H x W long
    depth: torch.Tensor  # B x H x W
    raw_images: list  # H x W x 3 arrays, kept for photometric teacher views
    indices: list


def collate(samples, indices=None, dtype=torch.float32) -> Batch:
    images = np.stack([s.image for s in samples]).transpose(0, 3, 1, 2)
    return Batch(
        images=torch.from_numpy(np.ascontiguousarray(images)).to(dtype),
        labels=torch.from_numpy(np.stack([s.seg_labels for s in samples])).long(),
        depth=torch.from_numpy(np.stack([s.depth for s in samples])).to(dtype),
        raw_images=[s.image for s in samples],
        indices=list(indices) if indices is not None else list(range(len(samples))),
    )
