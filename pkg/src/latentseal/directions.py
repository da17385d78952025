"""Key-derived orthonormal direction set and the projection bit codec.

The direction generator maps the key feature through a small MLP to L raw
rows, which are orthonormalized by QR in row order with a positive-diagonal
sign convention. That canonicalization is deterministic, differentiable, and
leaves an already orthonormal set untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .utils import (
    ConfigurationError,
    ValidationError,
    stable_seed,
    torch_generator,
)

_RANK_EPS = 1e-10


@dataclass
class ProjectionTargets:
    """Projection magnitudes encoding binary values."""

    xi_one: float = 0.1
    xi_zero: float = -0.1

    def __post_init__(self):
        if not (self.xi_one > self.xi_zero):
            raise ValidationError("xi_one must exceed xi_zero")
        if not (-1.0 < self.xi_zero and self.xi_one < 1.0):
            raise ValidationError("projection targets must lie in (-1, 1)")

    @property
    def midpoint(self) -> float:
        return (self.xi_one + self.xi_zero) / 2.0

    @property
    def half_gap(self) -> float:
        return (self.xi_one - self.xi_zero) / 2.0


@dataclass
class Message:
    """L-bit payload; logits, when present, are the extractor's evidence."""

    bits: np.ndarray
    logits: np.ndarray | None = None

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.int64).ravel()
        if not np.isin(self.bits, (0, 1)).all():
            raise ValidationError("message bits must be 0/1")
        if self.logits is not None:
            self.logits = np.asarray(self.logits, dtype=np.float64).ravel()
            if self.logits.shape != self.bits.shape:
                raise ValidationError("logits length differs from bits length")

    def __len__(self) -> int:
        return len(self.bits)

    @classmethod
    def from_logits(cls, logits) -> "Message":
        logits = np.asarray(
            logits.detach().cpu().numpy() if torch.is_tensor(logits) else logits,
            dtype=np.float64,
        ).ravel()
        return cls(bits=(logits > 0).astype(np.int64), logits=logits)

    @classmethod
    def random(cls, n_bits: int, seed: int) -> "Message":
        rng = np.random.default_rng(seed)
        return cls(bits=rng.integers(0, 2, size=n_bits))


@dataclass
class DirectionSet:
    """L x d orthonormal rows tied to a key fingerprint; immutable by convention."""

    rows: torch.Tensor
    key_fingerprint: str = ""

    def __post_init__(self):
        if self.rows.ndim != 2:
            raise ValidationError("direction rows must be a 2-d matrix")

    @property
    def n_bits(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


def orthonormalize_rows(raw: torch.Tensor, seed: int = 0) -> torch.Tensor:
    """Gram-Schmidt in row order via QR, diagonal forced positive.

    Rank-deficient inputs get a 1e-6-scaled seeded nudge and one retry;
    persisting deficiency raises ConfigurationError.
    """
    if raw.ndim != 2:
        raise ValidationError("expected a 2-d matrix of raw rows")
    n, d = raw.shape
    if n > d:
        raise ConfigurationError(f"cannot orthonormalize {n} rows in {d} dimensions")

    for attempt in range(2):
        q, r = torch.linalg.qr(raw.transpose(0, 1), mode="reduced")
        diag = torch.diagonal(r)
        if diag.abs().min().item() > _RANK_EPS * max(1.0, raw.abs().max().item()):
            sign = torch.where(diag >= 0, 1.0, -1.0).to(raw.dtype)
            return (q * sign.unsqueeze(0)).transpose(0, 1)
        if attempt == 0:
            g = torch_generator(stable_seed("rank-fix", seed))
            raw = raw + 1e-6 * torch.randn(raw.shape, generator=g, dtype=raw.dtype)
    raise ConfigurationError("direction rows remain rank-deficient after perturbation")


class DirectionGenerator(nn.Module):
    """Learnable map from the key feature to L orthonormal directions.

    Two-layer MLP (hidden 256 by default) whose output is viewed as L raw
    rows of dimension d and canonicalized by `orthonormalize_rows`; gradients
    flow through the QR factorization.
    """

    def __init__(self, feature_dim: int, n_bits: int, hidden_dim: int = 256,
                 seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        if n_bits > feature_dim:
            raise ConfigurationError(
                f"message length {n_bits} exceeds feature dim {feature_dim}; "
                "an orthonormal direction set is impossible"
            )
        self.feature_dim = feature_dim
        self.n_bits = n_bits
        self.seed = seed
        self.fc1 = nn.Linear(feature_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, n_bits * feature_dim)
        g = torch_generator(stable_seed("direction-gen", seed))
        with torch.no_grad():
            for layer in (self.fc1, self.fc2):
                fan_in = layer.weight.shape[1]
                layer.weight.copy_(
                    torch.randn(layer.weight.shape, generator=g) / fan_in**0.5
                )
                layer.bias.zero_()
        self.to(dtype)

    def forward(self, key_feature: torch.Tensor) -> torch.Tensor:
        if key_feature.shape != (self.feature_dim,):
            raise ValidationError(
                f"key feature must have shape ({self.feature_dim},), "
                f"got {tuple(key_feature.shape)}"
            )
        raw = self.fc2(torch.relu(self.fc1(key_feature)))
        raw = raw.view(self.n_bits, self.feature_dim)
        return orthonormalize_rows(raw, seed=self.seed)


def generate_directions(key_feature: torch.Tensor, generator: DirectionGenerator,
                        fingerprint: str = "") -> DirectionSet:
    return DirectionSet(rows=generator(key_feature), key_fingerprint=fingerprint)


def identity_directions(feature_dim: int, n_bits: int,
                        dtype: torch.dtype = torch.float32) -> DirectionSet:
    """Canonical-basis directions for the naive embedding ablation."""
    if n_bits > feature_dim:
        raise ConfigurationError("message length exceeds feature dim")
    return DirectionSet(rows=torch.eye(feature_dim, dtype=dtype)[:n_bits],
                        key_fingerprint="identity")


def target_projections(message: Message, targets: ProjectionTargets,
                       dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Per-bit target projection: xi_one where the bit is 1, else xi_zero."""
    bits = torch.from_numpy(message.bits)
    return torch.where(
        bits == 1,
        torch.tensor(targets.xi_one, dtype=dtype),
        torch.tensor(targets.xi_zero, dtype=dtype),
    )


def project(feature: torch.Tensor, directions: DirectionSet) -> torch.Tensor:
    """Dot product of the feature with every direction row.

    Accepts (d,) or (B, d) features and returns (L,) or (B, L).
    """
    rows = directions.rows
    if feature.shape[-1] != rows.shape[1]:
        raise ValidationError(
            f"feature dim {feature.shape[-1]} != direction dim {rows.shape[1]}"
        )
    return feature @ rows.transpose(0, 1)


def hard_decode(projections, targets: ProjectionTargets) -> Message:
    """Threshold oracle: bit = 1 iff projection exceeds the target midpoint.

    Exactly-midpoint projections decode to 0.
    """
    p = np.asarray(
        projections.detach().cpu().numpy() if torch.is_tensor(projections) else projections,
        dtype=np.float64,
    ).ravel()
    return Message(bits=(p > targets.midpoint).astype(np.int64))
