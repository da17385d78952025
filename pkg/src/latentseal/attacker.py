"""RL attacker: combinatorial attack policy, shaped rewards, failure memory.

The policy reads the watermarked image's latent feature and emits per-attack
selection probabilities (Bernoulli sampled) and normalized strengths. Its
reward combines extractor failure, latent drift (curiosity), proximity to
remembered failure regions, and a penalty on the number of active attacks.
Updates use a score-function (REINFORCE) estimator with a batch-mean
baseline and an entropy bonus.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .utils import ValidationError, stable_seed, torch_generator


@dataclass
class AttackerHyper:
    delta: float = 1.0       # curiosity scale
    nu: float = 0.1          # proximity scale
    epsilon: float = 1e-6    # proximity stabilizer
    o: float = 0.01          # active-action regularizer weight
    r: float = 0.01          # entropy weight
    memory_capacity: int = 1024
    action_penalty_sign: str = "penalty"  # {penalty, bonus}

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValidationError("epsilon must be positive")
        if min(self.delta, self.nu, self.o, self.r) < 0:
            raise ValidationError("attacker scales must be non-negative")
        if self.action_penalty_sign not in ("penalty", "bonus"):
            raise ValidationError("action_penalty_sign must be 'penalty' or 'bonus'")


@dataclass
class AttackAction:
    """One sampled combinatorial attack."""

    selected: np.ndarray               # 0/1 per registry entry
    strengths: np.ndarray              # tau in [0, 1] per entry
    probs: np.ndarray                  # selection probabilities
    log_prob: torch.Tensor             # graph-connected scalar
    entropy: torch.Tensor              # graph-connected scalar

    @property
    def n_active(self) -> int:
        return int(self.selected.sum())

    def masked(self, keep: np.ndarray) -> "AttackAction":
        """Copy with the selection restricted to `keep` (loss-branch plumbing)."""
        return AttackAction(selected=self.selected * keep.astype(self.selected.dtype),
                            strengths=self.strengths, probs=self.probs,
                            log_prob=self.log_prob, entropy=self.entropy)


@dataclass
class RewardBreakdown:
    failure: float
    curiosity: float
    proximity: float
    action_penalty: float
    total: float


def combine_rewards(failure: float, curiosity: float, proximity: float,
                    n_active: int, hyper: AttackerHyper) -> RewardBreakdown:
    penalty = hyper.o * n_active
    signed = -penalty if hyper.action_penalty_sign == "penalty" else penalty
    return RewardBreakdown(failure=failure, curiosity=curiosity, proximity=proximity,
                           action_penalty=penalty,
                           total=failure + curiosity + proximity + signed)


class AttackerPolicy(nn.Module):
    """Shared two-layer MLP backbone with selection-logit and strength heads."""

    def __init__(self, feature_dim: int, n_attacks: int, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.n_attacks = n_attacks
        self.fc1 = nn.Linear(feature_dim, 256)
        self.fc2 = nn.Linear(256, 128)
        self.logit_head = nn.Linear(128, n_attacks)
        self.strength_head = nn.Linear(128, n_attacks)
        g = torch_generator(stable_seed("attacker-policy", seed))
        with torch.no_grad():
            for layer in (self.fc1, self.fc2, self.logit_head, self.strength_head):
                fan_in = layer.weight.shape[1]
                layer.weight.copy_(
                    torch.randn(layer.weight.shape, generator=g) / fan_in**0.5
                )
                layer.bias.zero_()
        self.to(dtype)

    def forward(self, feature: torch.Tensor):
        h = torch.relu(self.fc2(torch.relu(self.fc1(feature))))
        return self.logit_head(h), torch.sigmoid(self.strength_head(h))


def act(feature: torch.Tensor, policy: AttackerPolicy, seed: int) -> AttackAction:
    """Sample a combinatorial attack for one latent feature."""
    if feature.ndim != 1:
        raise ValidationError("act expects a single (d,) feature")
    logits, strengths = policy(feature)
    probs = torch.sigmoid(logits)
    g = torch_generator(seed)
    with torch.no_grad():
        sampled = torch.bernoulli(probs.detach().double(), generator=g).to(logits.dtype)
    log_p1 = F.logsigmoid(logits)
    log_p0 = F.logsigmoid(-logits)
    log_prob = (sampled * log_p1 + (1.0 - sampled) * log_p0).sum()
    entropy = -(probs * log_p1 + (1.0 - probs) * log_p0).sum()
    return AttackAction(
        selected=sampled.detach().cpu().numpy().astype(np.int64),
        strengths=strengths.detach().cpu().numpy().astype(np.float64),
        probs=probs.detach().cpu().numpy().astype(np.float64),
        log_prob=log_prob,
        entropy=entropy,
    )


def reward_failure(extracted_logits: torch.Tensor, bits: torch.Tensor) -> float:
    """Mean per-bit BCE between extractor probabilities and the true bits."""
    p = torch.sigmoid(extracted_logits.detach().double()).clamp(1e-7, 1.0 - 1e-7)
    b = bits.double()
    bce = -(b * torch.log(p) + (1.0 - b) * torch.log(1.0 - p))
    return float(bce.mean())


def reward_curiosity(f_before: torch.Tensor, f_after: torch.Tensor,
                     delta: float) -> float:
    """Scaled squared latent displacement caused by the attack."""
    return float(delta * ((f_before - f_after) ** 2).sum(dim=-1).mean())


class FailureMemory:
    """FIFO buffer of latent features that defeated the extractor."""

    def __init__(self, capacity: int = 1024):
        if capacity < 1:
            raise ValidationError("memory capacity must be >= 1")
        self.capacity = capacity
        self.entries: deque = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, feature: torch.Tensor) -> None:
        self.entries.append(feature.detach().clone())

    def min_distance(self, feature: torch.Tensor) -> float:
        if not self.entries:
            return float("inf")
        stack = torch.stack(list(self.entries))
        return float((stack - feature.unsqueeze(0)).norm(dim=-1).min())

    def as_tensor(self) -> torch.Tensor | None:
        return torch.stack(list(self.entries)) if self.entries else None

    def load(self, tensor: torch.Tensor | None) -> None:
        self.entries.clear()
        if tensor is not None:
            for row in tensor:
                self.entries.append(row.clone())


def reward_proximity(f_attacked: torch.Tensor, memory: FailureMemory,
                     nu: float, epsilon: float) -> float:
    """nu / (distance to nearest remembered failure + epsilon); 0 when empty."""
    if epsilon <= 0:
        raise ValidationError("epsilon must be positive")
    rho = memory.min_distance(f_attacked)
    if rho == float("inf"):
        return 0.0
    return nu / (rho + epsilon)


def memory_update(memory: FailureMemory, f_attacked: torch.Tensor,
                  ber_value: float, lambda_fail: float) -> FailureMemory:
    """Store the attacked feature iff extraction failed (ber > lambda_fail)."""
    if not (0.0 <= ber_value <= 1.0):
        raise ValidationError("ber must lie in [0, 1]")
    if ber_value > lambda_fail:
        memory.add(f_attacked)
    return memory


def policy_loss(samples: list[tuple[AttackAction, RewardBreakdown]],
                entropy_weight: float, use_baseline: bool = True) -> torch.Tensor:
    """Score-function estimator: mean -(reward - baseline) * log_prob - r * H."""
    if not samples:
        raise ValidationError("policy_loss needs a non-empty batch")
    totals = [rb.total for _, rb in samples]
    baseline = sum(totals) / len(totals) if use_baseline else 0.0
    terms = [-(rb.total - baseline) * action.log_prob for action, rb in samples]
    entropies = [action.entropy for action, _ in samples]
    loss = torch.stack(terms).mean() - entropy_weight * torch.stack(entropies).mean()
    return loss
