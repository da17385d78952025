"""Semantic feature backbone: unit-norm latent features for images and keys.

Two modes:
  * ``toy`` — a small seeded MLP over block-averaged pixels. Deterministic,
    differentiable, trains nothing; fast enough for CPU experiments. The
    block-average stem folds into the first affine layer mathematically but
    is kept explicit for speed and for mild robustness to photometric noise.
  * ``pretrained`` — a frozen TorchScript module supplied by the caller
    mapping (B, 3, R, R) images in [0, 1] to (B, feature_dim) features,
    which are then L2-normalized.

Key features are derived by expanding a cryptographic hash of the key string
into ``feature_dim`` pseudo-normal values, so keys are reproducible without
any text encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .utils import (
    ValidationError,
    as_batch,
    l2_normalize,
    stable_seed,
    torch_generator,
)


@dataclass
class BackboneConfig:
    feature_dim: int = 512
    mode: str = "toy"  # {toy, pretrained}
    input_resolution: int = 224
    seed: int = 0
    hidden_dim: int = 256
    pool_grid: int = 16
    weights_path: str | None = None  # TorchScript file, pretrained mode only

    def __post_init__(self):
        if self.mode not in ("toy", "pretrained"):
            raise ValidationError(f"unknown backbone mode {self.mode!r}")
        if self.feature_dim < 1 or self.input_resolution < 1:
            raise ValidationError("feature_dim and input_resolution must be positive")


def _seeded_linear(in_dim: int, out_dim: int, std: float, seed: int) -> nn.Linear:
    layer = nn.Linear(in_dim, out_dim)
    g = torch_generator(seed)
    with torch.no_grad():
        layer.weight.copy_(torch.randn(out_dim, in_dim, generator=g) * std)
        layer.bias.zero_()
    return layer


class SemanticBackbone(nn.Module):
    """Frozen image/key encoder producing unit-norm latent features."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.mode == "toy":
            grid = min(cfg.pool_grid, cfg.input_resolution)
            if cfg.input_resolution % grid != 0:
                raise ValidationError(
                    f"resolution {cfg.input_resolution} not divisible by pool grid {grid}"
                )
            self.grid = grid
            in_dim = 3 * grid * grid
            # gain keeps tanh pre-activations in the responsive band for
            # centered pixels (roughly std 0.2)
            self.fc1 = _seeded_linear(in_dim, cfg.hidden_dim, 5.0 / in_dim**0.5,
                                      stable_seed("backbone-fc1", cfg.seed))
            self.fc2 = _seeded_linear(cfg.hidden_dim, cfg.feature_dim,
                                      1.0 / cfg.hidden_dim**0.5,
                                      stable_seed("backbone-fc2", cfg.seed))
            self.scripted = None
        else:
            if not cfg.weights_path:
                raise ValidationError("pretrained mode requires backbone.weights_path")
            self.scripted = torch.jit.load(cfg.weights_path, map_location="cpu")
            self.grid = None
        for p in self.parameters():
            p.requires_grad_(False)

    def trainable(self, flag: bool = True) -> "SemanticBackbone":
        """Opt into gradient tracking (the training loop never does)."""
        for p in self.parameters():
            p.requires_grad_(flag)
        return self

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.encode_image(images)

    def encode_image(self, images) -> torch.Tensor:
        """(B, 3, R, R) or single (3, R, R) images in [0, 1] -> (B, d) unit features."""
        x = as_batch(images, dtype=self._dtype())
        if not torch.isfinite(x).all():
            raise ValidationError("image contains non-finite pixels")
        r = self.cfg.input_resolution
        if x.shape[-2:] != (r, r) or x.shape[1] != 3:
            raise ValidationError(
                f"expected images shaped (B, 3, {r}, {r}), got {tuple(x.shape)}"
            )
        if self.scripted is not None:
            feats = self.scripted(x)
        else:
            z = x - 0.5
            pooled = torch.nn.functional.adaptive_avg_pool2d(z, self.grid)
            h = torch.tanh(self.fc1(pooled.flatten(1)))
            feats = self.fc2(h)
        return l2_normalize(feats, dim=-1)

    def encode_key(self, key: str) -> torch.Tensor:
        """Expand a secret key string to a unit-norm (d,) feature."""
        if not isinstance(key, str) or len(key) == 0:
            raise ValidationError("key must be a non-empty string")
        rng = np.random.default_rng(stable_seed("key-feature", self.cfg.seed, key))
        vec = torch.from_numpy(rng.standard_normal(self.cfg.feature_dim))
        return l2_normalize(vec.to(self._dtype()), dim=-1)

    def _dtype(self) -> torch.dtype:
        for p in self.parameters():
            return p.dtype
        return torch.float32
