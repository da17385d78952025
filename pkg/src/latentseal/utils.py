"""Shared plumbing: seeding, normalization, bit packing, image tensor handling."""

from __future__ import annotations

import hashlib

import numpy as np
import torch


class ValidationError(ValueError):
    """Input violates an operation precondition."""


class ConfigurationError(ValueError):
    """Configuration values are inconsistent or unknown."""


class DivergenceError(RuntimeError):
    """Training produced non-finite values."""


NORM_TOL = 1e-6


def stable_seed(*parts) -> int:
    """Deterministic 63-bit seed derived from arbitrary hashable parts.

    Independent of PYTHONHASHSEED; stable across processes and platforms.
    """
    h = hashlib.sha256()
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "big") & 0x7FFF_FFFF_FFFF_FFFF


def torch_generator(seed: int, device: str = "cpu") -> torch.Generator:
    g = torch.Generator(device=device)
    g.manual_seed(int(seed))
    return g


def l2_normalize(x: torch.Tensor, dim: int = -1, eps: float = 1e-12) -> torch.Tensor:
    """Project onto the unit sphere along `dim`."""
    return x / x.norm(dim=dim, keepdim=True).clamp_min(eps)


def check_unit_norm(x: torch.Tensor, dim: int = -1, tol: float = NORM_TOL) -> None:
    norms = x.norm(dim=dim)
    if not torch.isfinite(x).all():
        raise ValidationError("feature contains non-finite values")
    err = (norms - 1.0).abs().max().item()
    if err > tol:
        raise ValidationError(f"feature norm deviates from 1 by {err:.3e} (> {tol:.0e})")


def key_fingerprint(key: str) -> str:
    """Public identifier of a secret key; safe to persist (never the key itself)."""
    return hashlib.sha256(key.encode("utf-8")).hexdigest()[:16]


def bits_to_hex(bits: np.ndarray) -> str:
    """Pack a 0/1 vector into hex, bits[0] as the MSB of the first nibble."""
    bits = np.asarray(bits).astype(np.uint8).ravel()
    pad = (-len(bits)) % 4
    padded = np.concatenate([bits, np.zeros(pad, dtype=np.uint8)])
    nibbles = padded.reshape(-1, 4)
    vals = nibbles @ np.array([8, 4, 2, 1], dtype=np.uint8)
    return "".join(f"{v:x}" for v in vals)


def hex_to_bits(text: str, n_bits: int) -> np.ndarray:
    """Inverse of bits_to_hex; `n_bits` trims the nibble padding."""
    if len(text) * 4 < n_bits:
        raise ValidationError(f"hex string holds {len(text) * 4} bits, need {n_bits}")
    vals = np.array([int(c, 16) for c in text], dtype=np.uint8)
    bits = ((vals[:, None] >> np.array([3, 2, 1, 0])) & 1).ravel()
    return bits[:n_bits].astype(np.int64)


def to_chw(image, dtype=torch.float32) -> torch.Tensor:
    """Canonicalize a single image to a (3, H, W) float tensor in [0, 1].

    Accepts torch (3, H, W) / (H, W, 3) or numpy HWC/CHW arrays.
    """
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(np.ascontiguousarray(image))
    if not torch.is_tensor(image):
        raise ValidationError(f"expected tensor or ndarray, got {type(image).__name__}")
    if image.ndim != 3:
        raise ValidationError(f"expected a 3-d image, got shape {tuple(image.shape)}")
    if image.shape[0] != 3 and image.shape[-1] == 3:
        image = image.permute(2, 0, 1)
    if image.shape[0] != 3:
        raise ValidationError(f"no channel axis of size 3 in shape {tuple(image.shape)}")
    return image.to(dtype).contiguous()


def as_batch(images, dtype=torch.float32) -> torch.Tensor:
    """Canonicalize to (B, 3, H, W); single images gain a batch axis."""
    if torch.is_tensor(images) and images.ndim == 4:
        return images.to(dtype)
    if isinstance(images, np.ndarray) and images.ndim == 4:
        return torch.from_numpy(np.ascontiguousarray(images)).to(dtype)
    return to_chw(images, dtype=dtype).unsqueeze(0)
