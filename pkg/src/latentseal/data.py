"""Dataset ingestion and the procedural toy image generator.

Toy images are seeded textured gradients with a few solid shapes; they are
cheap to generate, visually diverse, and reproducible, which makes them
suitable for desk-scale training and for donor images inside content-mixing
attacks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .utils import ValidationError, stable_seed


def make_toy_image(seed: int, resolution: int = 64) -> torch.Tensor:
    """One procedural RGB image in [0, 1], shape (3, R, R)."""
    rng = np.random.default_rng(seed)
    r = resolution
    yy, xx = np.mgrid[0:r, 0:r].astype(np.float64) / max(r - 1, 1)

    # background: linear gradient between two random colors at a random angle
    c0 = rng.uniform(0.05, 0.95, size=3)
    c1 = rng.uniform(0.05, 0.95, size=3)
    angle = rng.uniform(0.0, 2.0 * math.pi)
    t = (xx * math.cos(angle) + yy * math.sin(angle) + 1.0) / 2.0
    img = c0[:, None, None] * (1.0 - t) + c1[:, None, None] * t

    # a few solid shapes (rectangles and disks)
    for _ in range(rng.integers(1, 4)):
        color = rng.uniform(0.0, 1.0, size=3)
        cx, cy = rng.uniform(0.15, 0.85, size=2)
        if rng.random() < 0.5:
            w, h = rng.uniform(0.08, 0.35, size=2)
            mask = (np.abs(xx - cx) < w / 2) & (np.abs(yy - cy) < h / 2)
        else:
            rad = rng.uniform(0.05, 0.2)
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 < rad**2
        alpha = rng.uniform(0.6, 1.0)
        img = np.where(mask[None], (1 - alpha) * img + alpha * color[:, None, None], img)

    # coarse texture: low-frequency noise upsampled, plus faint pixel noise
    g = max(r // 8, 2)
    coarse = rng.normal(0.0, 0.06, size=(3, g, g))
    tex = np.array(
        Image.fromarray(((coarse.transpose(1, 2, 0) + 0.5) * 255).clip(0, 255).astype(np.uint8))
        .resize((r, r), Image.BILINEAR),
        dtype=np.float64,
    ).transpose(2, 0, 1) / 255.0 - 0.5
    img = img + tex + rng.normal(0.0, 0.01, size=img.shape)

    return torch.from_numpy(np.clip(img, 0.0, 1.0)).float()


def make_toy_dataset(n: int, resolution: int = 64, seed: int = 0) -> torch.Tensor:
    """Stack of `n` toy images, shape (n, 3, R, R)."""
    if n < 1:
        raise ValidationError("dataset size must be >= 1")
    return torch.stack(
        [make_toy_image(stable_seed("toy-image", seed, i), resolution) for i in range(n)]
    )


@dataclass
class DatasetManifest:
    """Ordered view over an image directory; ordering is lexicographic."""

    root: str
    paths: list = field(default_factory=list)
    resolution: int = 64
    split: str = "train"

    def __len__(self) -> int:
        return len(self.paths)


IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def scan_image_dir(root, resolution: int, split: str = "train") -> DatasetManifest:
    root = Path(root)
    if not root.is_dir():
        raise ValidationError(f"dataset directory not found: {root}")
    paths = sorted(
        str(p) for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file()
    )
    if not paths:
        raise ValidationError(f"no images under {root}")
    return DatasetManifest(root=str(root), paths=paths, resolution=resolution, split=split)


def load_image(path, resolution: int | None = None) -> torch.Tensor:
    """Read an 8-bit RGB file to a (3, H, W) float tensor, resizing if asked."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if resolution is not None and im.size != (resolution, resolution):
            im = im.resize((resolution, resolution), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(image: torch.Tensor, path) -> None:
    """Write a (3, H, W) tensor in [0, 1] as an 8-bit RGB file."""
    arr = (image.detach().clamp(0, 1).cpu().numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0)).save(path)


def load_manifest_images(manifest: DatasetManifest) -> torch.Tensor:
    return torch.stack([load_image(p, manifest.resolution) for p in manifest.paths])
