"""Message recovery and BER-threshold deepfake detection.

The default extractor reads the L direction projections through a two-layer
MLP initialized to reproduce a scaled sign decode, so training starts from a
sensible operating point. The `compressed` variant instead compresses the
raw feature to 128 dimensions before the MLP, kept for ablation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .directions import DirectionSet, Message, project
from .utils import ValidationError, stable_seed, torch_generator


class WatermarkExtractor(nn.Module):
    """Projection (or compressed-feature) MLP emitting per-bit logits."""

    def __init__(self, n_bits: int, feature_dim: int, arch: str = "projection",
                 hidden_dim: int = 256, gain: float = 20.0, seed: int = 0):
        super().__init__()
        if arch not in ("projection", "compressed"):
            raise ValidationError(f"unknown extractor arch {arch!r}")
        self.arch = arch
        self.n_bits = n_bits
        g = torch_generator(stable_seed("extractor", seed))
        if arch == "projection":
            self.fc1 = nn.Linear(n_bits, hidden_dim)
            self.fc2 = nn.Linear(hidden_dim, n_bits)
            with torch.no_grad():
                # p = relu(p) - relu(-p): paired +/- identity rows make the MLP
                # reproduce logits = gain * p at init; leftover units get small
                # noise so they stay trainable
                self.fc1.weight.copy_(
                    0.02 * torch.randn(self.fc1.weight.shape, generator=g) / n_bits**0.5
                )
                self.fc2.weight.copy_(
                    0.02 * torch.randn(self.fc2.weight.shape, generator=g) / hidden_dim**0.5
                )
                pairs = min(n_bits, hidden_dim // 2)
                idx = torch.arange(pairs)
                self.fc1.weight[:2 * pairs].zero_()
                self.fc1.weight[idx, idx] = 1.0
                self.fc1.weight[pairs + idx, idx] = -1.0
                self.fc2.weight[:, :2 * pairs].zero_()
                self.fc2.weight[idx, idx] = gain
                self.fc2.weight[idx, pairs + idx] = -gain
                self.fc1.bias.zero_()
                self.fc2.bias.zero_()
        else:
            self.compress = nn.Linear(feature_dim, 128)
            self.fc1 = nn.Linear(128, hidden_dim)
            self.fc2 = nn.Linear(hidden_dim, n_bits)
            with torch.no_grad():
                for layer in (self.compress, self.fc1, self.fc2):
                    fan_in = layer.weight.shape[1]
                    layer.weight.copy_(
                        torch.randn(layer.weight.shape, generator=g) / fan_in**0.5
                    )
                    layer.bias.zero_()

    def forward(self, features: torch.Tensor, directions: DirectionSet) -> torch.Tensor:
        """Per-bit logits, shape (B, L) for (B, d) features (or (L,) for (d,))."""
        if self.arch == "projection":
            x = project(features, directions)
        else:
            x = self.compress(features)
        return self.fc2(torch.relu(self.fc1(x)))


def logits_to_message(logits: torch.Tensor) -> Message:
    return Message.from_logits(logits)


def ber(m1, m2) -> float:
    """Fraction of differing bits between two equal-length messages."""
    b1 = m1.bits if isinstance(m1, Message) else np.asarray(m1, dtype=np.int64).ravel()
    b2 = m2.bits if isinstance(m2, Message) else np.asarray(m2, dtype=np.int64).ravel()
    if b1.shape != b2.shape:
        raise ValidationError(f"message lengths differ: {b1.shape[0]} vs {b2.shape[0]}")
    if len(b1) == 0:
        raise ValidationError("messages must be non-empty")
    return float(np.mean(b1 != b2))


@dataclass
class DetectionVerdict:
    ber: float
    threshold: float
    is_fake: bool
    bits_recovered: Message

    def __post_init__(self):
        if not (0.0 <= self.threshold <= 1.0):
            raise ValidationError("threshold must lie in [0, 1]")


def verdict_from_ber(ber_value: float, threshold: float,
                     recovered: Message) -> DetectionVerdict:
    """Flag as fake exactly when the bit error rate strictly exceeds lambda."""
    return DetectionVerdict(ber=float(ber_value), threshold=float(threshold),
                            is_fake=bool(ber_value > threshold),
                            bits_recovered=recovered)


def calibrate_threshold(benign_bers, malicious_bers, grid_points: int = 101) -> float:
    """Grid-search lambda maximizing balanced accuracy; ties go to larger lambda.

    Benign samples count as correct when ber <= lambda, malicious when
    ber > lambda.
    """
    benign = np.asarray(list(benign_bers), dtype=np.float64)
    malicious = np.asarray(list(malicious_bers), dtype=np.float64)
    if benign.size == 0 or malicious.size == 0:
        raise ValidationError("calibration needs non-empty benign and malicious BER lists")
    best_lam, best_score = 0.0, -1.0
    for lam in np.linspace(0.0, 1.0, grid_points):
        score = 0.5 * np.mean(benign <= lam) + 0.5 * np.mean(malicious > lam)
        if score >= best_score:
            best_lam, best_score = float(lam), float(score)
    return best_lam
