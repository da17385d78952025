"""Watermark embedding: message/direction fusion, latent perturbation,
image rendering, and the composite training loss.

The perturbed latent always returns to the unit sphere, which bounds how far
the embedder can drift from the original representation. Rendering has two
modes: `residual` adds a bounded decoded residual to the input image (the
desk-scale default, identity at initialization), `regenerate` decodes the
full image from the latent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .directions import DirectionSet, Message, ProjectionTargets
from .utils import DivergenceError, ValidationError, l2_normalize, stable_seed, torch_generator


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 4.0
    gamma: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValidationError("loss weights must be non-negative")
        if self.alpha == self.beta == self.gamma == 0:
            raise ValidationError("at least one loss weight must be positive")


@dataclass
class LossBreakdown:
    total: torch.Tensor
    clip: float
    dir: float
    ext: float
    missing_benign: bool = False
    missing_malicious: bool = False


def fuse_message_directions(message, directions: DirectionSet,
                            targets: ProjectionTargets) -> torch.Tensor:
    """Signed aggregate of the direction rows: sum_i s_i * xi * d_i.

    s_i = +1 for bit 1 and -1 for bit 0; xi is half the target gap. Accepts a
    single Message or a (B, L) bit tensor and returns (d,) or (B, d).
    """
    rows = directions.rows
    if isinstance(message, Message):
        bits = torch.from_numpy(message.bits).to(rows.dtype)
    else:
        bits = message.to(rows.dtype)
    if bits.shape[-1] != rows.shape[0]:
        raise ValidationError(
            f"message length {bits.shape[-1]} != direction count {rows.shape[0]}"
        )
    signs = 2.0 * bits - 1.0
    return (signs * targets.half_gap) @ rows


class PerturbationNet(nn.Module):
    """Maps (feature, fused directions) to a tanh-bounded latent perturbation.

    Initialization uses paired tanh units (x = tanh(v) - tanh(-v) for small v)
    to start from the canonical projection encoder: the perturbation moves
    the latent toward the target projections, cancelling the feature's own
    component in the direction span when that span is supplied. Zeroing the
    final layer recovers the exact identity embedding.
    """

    def __init__(self, feature_dim: int, hidden_dim: int = 512, seed: int = 0,
                 passthrough_gain: float = 12.0,
                 span_projection: torch.Tensor | None = None,
                 perturb_scale: float = 0.05):
        super().__init__()
        self.fc1 = nn.Linear(2 * feature_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, feature_dim)
        g = torch_generator(stable_seed("perturb-net", seed))
        with torch.no_grad():
            self.fc1.weight.copy_(
                torch.randn(self.fc1.weight.shape, generator=g)
                / (2 * feature_dim) ** 0.5
            )
            self.fc2.weight.copy_(
                0.01 * torch.randn(self.fc2.weight.shape, generator=g)
                / hidden_dim**0.5
            )
            pairs = min(feature_dim, hidden_dim // 2)
            idx = torch.arange(pairs)
            self.fc1.weight[:2 * pairs].zero_()
            if span_projection is not None:
                # delta* = (fused - P f) / s puts the latent's span component
                # exactly on the target projections
                scale = 1.0 / max(perturb_scale, 1e-3)
                self.fc1.weight[:pairs, :feature_dim] = -scale * span_projection[:pairs]
                self.fc1.weight[pairs + idx, :feature_dim] = (
                    scale * span_projection[:pairs])
                self.fc1.weight[idx, feature_dim + idx] = scale
                self.fc1.weight[pairs + idx, feature_dim + idx] = -scale
                out_gain = 0.5
            else:
                self.fc1.weight[idx, feature_dim + idx] = 1.0
                self.fc1.weight[pairs + idx, feature_dim + idx] = -1.0
                out_gain = passthrough_gain / 2.0
            self.fc2.weight[:, :2 * pairs] = 0.0
            self.fc2.weight[idx, idx] = out_gain
            self.fc2.weight[idx, pairs + idx] = -out_gain
            self.fc1.bias.zero_()
            self.fc2.bias.zero_()

    def forward(self, feature: torch.Tensor, fused: torch.Tensor) -> torch.Tensor:
        h = torch.tanh(self.fc1(torch.cat([feature, fused], dim=-1)))
        return torch.tanh(self.fc2(h))


class ImageDecoder(nn.Module):
    """Latent-to-image decoder with tanh output in [-1, 1].

    Two architectures:
      * ``block`` (default) — one linear map onto a coarse color grid,
        bilinearly upsampled to full resolution. The coarse grid keeps the
        rendered patterns low-frequency and gives a well-conditioned
        latent-to-pixel channel that trains within a small step budget.
      * ``conv`` — FC to a 4x4 map followed by stride-2 transposed convs,
        for larger training budgets.

    The output layer starts small but non-zero so latent gradients flow from
    the first step; zeroing it recovers an exact identity rendering in
    residual mode. A fixed pre-tanh multiplier keeps raw output weights
    small, so optimizer steps translate into a usable output range within a
    short step budget.
    """

    BLOCK_GAIN = 160.0
    CONV_GAIN = 16.0

    def __init__(self, feature_dim: int, resolution: int, base_channels: int = 16,
                 seed: int = 0, arch: str = "block", grid: int = 16):
        super().__init__()
        if resolution < 8:
            raise ValidationError("decoder needs resolution >= 8")
        if arch not in ("block", "conv"):
            raise ValidationError(f"unknown decoder arch {arch!r}")
        self.resolution = resolution
        self.arch = arch
        g = torch_generator(stable_seed("decoder", seed))
        if arch == "block":
            self.grid = min(grid, resolution)
            self.fc = nn.Linear(feature_dim, 3 * self.grid * self.grid)
            with torch.no_grad():
                self.fc.weight.copy_(
                    0.005 * torch.randn(self.fc.weight.shape, generator=g)
                    / feature_dim**0.5)
                self.fc.bias.zero_()
            self.ups = nn.ModuleList()
            self.head = None
            return
        n_up = max(1, math.ceil(math.log2(resolution / 4)))
        self.native = 4 * 2**n_up
        channels = [min(256, base_channels * 2 ** (n_up - i)) for i in range(n_up + 1)]
        self.fc = nn.Linear(feature_dim, channels[0] * 16)
        self.c0 = channels[0]
        ups = []
        for cin, cout in zip(channels[:-1], channels[1:]):
            ups.append(nn.ConvTranspose2d(cin, cout, kernel_size=4, stride=2, padding=1))
        self.ups = nn.ModuleList(ups)
        self.head = nn.Conv2d(channels[-1], 3, kernel_size=3, padding=1)
        with torch.no_grad():
            for m in [self.fc, *self.ups]:
                fan_in = m.weight.shape[1] * (m.weight[0, 0].numel() if m.weight.ndim > 2 else 1)
                m.weight.copy_(torch.randn(m.weight.shape, generator=g) / fan_in**0.5)
                m.bias.zero_()
            head_fan = self.head.weight.shape[1] * self.head.weight[0, 0].numel()
            self.head.weight.copy_(
                0.05 * torch.randn(self.head.weight.shape, generator=g) / head_fan**0.5)
            self.head.bias.zero_()

    def forward(self, q: torch.Tensor) -> torch.Tensor:
        if q.ndim == 1:
            q = q.unsqueeze(0)
        if self.arch == "block":
            u = self.fc(q).view(-1, 3, self.grid, self.grid)
            if self.grid != self.resolution:
                u = F.interpolate(u, size=(self.resolution, self.resolution),
                                  mode="bilinear", align_corners=False)
            return torch.tanh(self.BLOCK_GAIN * u)
        h = self.fc(q).view(-1, self.c0, 4, 4)
        for up in self.ups:
            h = torch.tanh(up(h))
        out = torch.tanh(self.CONV_GAIN * self.head(h))
        if self.native != self.resolution:
            out = F.interpolate(out, size=(self.resolution, self.resolution),
                                mode="bilinear", align_corners=False)
        return out


@dataclass
class EmbedderConfig:
    perturb_scale: float = 0.05
    residual_mode: bool = True
    residual_scale: float = 0.08
    perturb_hidden: int = 512
    decoder_arch: str = "block"  # {block, conv}
    decoder_grid: int = 16
    decoder_base_channels: int = 8
    passthrough_gain: float = 12.0


class WatermarkEmbedder(nn.Module):
    """Perturbation net plus decoder behind one embedding surface."""

    def __init__(self, feature_dim: int, resolution: int,
                 cfg: EmbedderConfig | None = None, seed: int = 0,
                 span_projection: torch.Tensor | None = None):
        super().__init__()
        self.cfg = cfg or EmbedderConfig()
        self.perturb_net = PerturbationNet(feature_dim, self.cfg.perturb_hidden,
                                           seed=seed,
                                           passthrough_gain=self.cfg.passthrough_gain,
                                           span_projection=span_projection,
                                           perturb_scale=self.cfg.perturb_scale)
        self.decoder = ImageDecoder(feature_dim, resolution,
                                    self.cfg.decoder_base_channels, seed=seed,
                                    arch=self.cfg.decoder_arch,
                                    grid=self.cfg.decoder_grid)

    def perturb(self, feature: torch.Tensor, fused: torch.Tensor) -> torch.Tensor:
        """Spherical re-projection of the perturbed feature (unit norm out)."""
        delta = self.perturb_net(feature, fused)
        if not torch.isfinite(delta).all():
            raise DivergenceError("perturbation produced non-finite activations")
        return l2_normalize(feature + self.cfg.perturb_scale * delta, dim=-1)

    def decode_image(self, q: torch.Tensor) -> torch.Tensor:
        """Decoded image in [-1, 1]; callers map to [0, 1] for storage."""
        return self.decoder(q if q.ndim == 2 else q.unsqueeze(0))

    def render(self, images: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
        """Watermarked image in [0, 1] from original pixels and perturbed latent."""
        decoded = self.decode_image(q)
        if self.cfg.residual_mode:
            return (images + self.cfg.residual_scale * decoded).clamp(0.0, 1.0)
        return (decoded + 1.0) / 2.0


def soft_bit_error_rate(logits: torch.Tensor, bits: torch.Tensor) -> torch.Tensor:
    """Differentiable disagreement: mean of p where bit=0 and (1-p) where bit=1."""
    p = torch.sigmoid(logits)
    return (bits * (1.0 - p) + (1.0 - bits) * p).mean()


def hard_bit_error_rate(logits: torch.Tensor, bits: torch.Tensor) -> torch.Tensor:
    pred = (logits > 0).to(bits.dtype)
    return (pred != bits).to(logits.dtype).mean()


def composite_loss(f_original: torch.Tensor, f_watermarked: torch.Tensor,
                   benign_branches, malicious_branch,
                   weights: LossWeights, ext_mode: str = "straight_through",
                   ) -> LossBreakdown:
    """Weighted sum of imperceptibility, embedding accuracy, and fragility.

    * clip term: squared latent displacement between original and watermarked
      features (mean over the batch).
    * dir term: per-bit binary cross-entropy over the benign branches (clean
      and benign-attacked variants), each given as a (logits, bits) pair.
    * ext term: negated bit error rate on the malicious branch; the
      straight-through mode reports the hard BER while backpropagating the
      soft surrogate, `soft` mode uses the surrogate in the forward value too.

    Missing branches contribute zero and are flagged in the breakdown.
    """
    if ext_mode not in ("straight_through", "soft"):
        raise ValidationError(f"unknown ext_mode {ext_mode!r}")
    zero = f_original.new_zeros(())
    l_clip = ((f_original - f_watermarked) ** 2).sum(dim=-1).mean()

    if not benign_branches:
        l_dir, missing_benign = zero, True
    else:
        n_bits = benign_branches[0][0].shape[-1]
        stack = torch.cat([lg.reshape(-1, n_bits) for lg, _ in benign_branches], dim=0)
        target = torch.cat(
            [bt.reshape(-1, n_bits) for _, bt in benign_branches], dim=0
        ).to(stack.dtype)
        l_dir = F.binary_cross_entropy_with_logits(stack, target)
        missing_benign = False

    if malicious_branch is None:
        l_ext, missing_malicious = zero, True
    else:
        malicious_logits, malicious_bits = malicious_branch
        target = malicious_bits.to(malicious_logits.dtype)
        soft = soft_bit_error_rate(malicious_logits, target)
        if ext_mode == "soft":
            l_ext = -soft
        else:
            hard = hard_bit_error_rate(malicious_logits, target)
            l_ext = -(hard.detach() + soft - soft.detach())
        missing_malicious = False

    total = weights.alpha * l_clip + weights.beta * l_dir + weights.gamma * l_ext
    if not torch.isfinite(total):
        raise DivergenceError(
            f"non-finite loss (clip={l_clip.item():.4g}, dir={l_dir.item():.4g}, "
            f"ext={l_ext.item():.4g})"
        )
    return LossBreakdown(total=total, clip=float(l_clip.detach()),
                         dir=float(l_dir.detach()), ext=float(l_ext.detach()),
                         missing_benign=missing_benign,
                         missing_malicious=missing_malicious)
