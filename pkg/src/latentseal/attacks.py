"""Parameterized image attacks: registry, strength mapping, composition.

Benign entries mimic everyday processing (JPEG, noise, crop, jitter,
affine). Malicious entries are desk-scale proxies for generative content
edits (donor mixup, cross-image patch swap, elastic warp); an external
command hook can substitute real generators. Composition follows registry
order so runs are reproducible.

`apply` renders the exact transforms. `apply_surrogate` renders the same
composition through a differentiable path: most transforms are already
differentiable in the image argument, quantizing ones (JPEG, external) fall
back to a straight-through estimator whose forward output is bit-identical
to the exact path.
"""

from __future__ import annotations

import io
import logging
import math
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .data import make_toy_image
from .utils import ValidationError, stable_seed, torch_generator

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttackSpec:
    id: int
    name: str
    kind: str  # {benign, malicious}
    param_min: float
    param_max: float
    has_surrogate: bool = True

    def __post_init__(self):
        if self.kind not in ("benign", "malicious"):
            raise ValidationError(f"unknown attack kind {self.kind!r}")
        if not self.param_min < self.param_max:
            raise ValidationError(f"attack {self.name}: need param_min < param_max")


class AttackRegistry:
    """Ordered attack collection; composition order is the listed order."""

    def __init__(self, specs: list[AttackSpec], external_cmd: str | None = None):
        names = [s.name for s in specs]
        ids = [s.id for s in specs]
        if len(set(names)) != len(names) or len(set(ids)) != len(ids):
            raise ValidationError("attack names and ids must be unique")
        self.specs = list(specs)
        self.external_cmd = external_cmd

    def __len__(self) -> int:
        return len(self.specs)

    def __iter__(self):
        return iter(self.specs)

    def __getitem__(self, i: int) -> AttackSpec:
        return self.specs[i]

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.specs]

    def mask(self, kind: str) -> np.ndarray:
        return np.array([s.kind == kind for s in self.specs], dtype=bool)

    def indices(self, kind: str) -> list[int]:
        return [i for i, s in enumerate(self.specs) if s.kind == kind]


def default_registry(external_cmd: str | None = None) -> AttackRegistry:
    specs = [
        AttackSpec(0, "jpeg", "benign", 30.0, 95.0, has_surrogate=False),
        AttackSpec(1, "noise", "benign", 0.0, 0.1),
        AttackSpec(2, "crop", "benign", 0.6, 1.0),
        AttackSpec(3, "jitter", "benign", 0.0, 0.3),
        AttackSpec(4, "affine", "benign", 0.0, 15.0),
        AttackSpec(5, "mixup", "malicious", 0.3, 0.9),
        AttackSpec(6, "patch_swap", "malicious", 0.2, 0.6),
        AttackSpec(7, "elastic_warp", "malicious", 2.0, 10.0),
    ]
    if external_cmd:
        specs.append(
            AttackSpec(len(specs), "external", "malicious", 0.0, 1.0, has_surrogate=False)
        )
    return AttackRegistry(specs, external_cmd=external_cmd)


def registry_from_config(attacks_cfg: dict) -> AttackRegistry:
    """Registry from the `attacks` config section (entries + external hook)."""
    external_cmd = attacks_cfg.get("external_cmd")
    entries = attacks_cfg.get("entries")
    if entries is None:
        return default_registry(external_cmd)
    specs = []
    for entry in entries:
        if not entry.get("enabled", True):
            continue
        name = entry["name"]
        if name not in _TRANSFORMS and name != "external":
            raise ValidationError(f"no transform implemented for attack {name!r}")
        specs.append(AttackSpec(
            id=len(specs), name=name, kind=entry["kind"],
            param_min=float(entry["min"]), param_max=float(entry["max"]),
            has_surrogate=name not in ("jpeg", "external"),
        ))
    if external_cmd and "external" not in [s.name for s in specs]:
        specs.append(AttackSpec(len(specs), "external", "malicious", 0.0, 1.0,
                                has_surrogate=False))
    if not specs:
        raise ValidationError("attack registry is empty after filtering")
    return AttackRegistry(specs, external_cmd=external_cmd)


def map_params(spec: AttackSpec, tau: float) -> float:
    """Affine map from normalized strength tau in [0, 1] to the attack parameter."""
    tau = float(tau)
    if tau < 0.0 or tau > 1.0:
        logger.warning("strength %.4f for %s outside [0, 1]; clamping", tau, spec.name)
        tau = min(max(tau, 0.0), 1.0)
    return spec.param_min + (spec.param_max - spec.param_min) * tau


# ---------------------------------------------------------------------------
# individual transforms; all take/return (3, H, W) tensors in [0, 1]
# ---------------------------------------------------------------------------


def jpeg_roundtrip(image: torch.Tensor, quality: float, seed: int = 0) -> torch.Tensor:
    q = int(round(min(max(quality, 1.0), 95.0)))
    arr = (image.detach().clamp(0, 1).cpu().numpy() * 255.0).round().astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr.transpose(1, 2, 0)).save(buf, format="JPEG", quality=q)
    buf.seek(0)
    back = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(back.transpose(2, 0, 1)).to(image.dtype)


def gaussian_noise(image: torch.Tensor, sigma: float, seed: int = 0) -> torch.Tensor:
    if sigma <= 0.0:
        return image
    g = torch_generator(seed)
    noise = torch.randn(image.shape, generator=g, dtype=image.dtype)
    return (image + sigma * noise).clamp(0.0, 1.0)


def crop_resize(image: torch.Tensor, keep: float, seed: int = 0) -> torch.Tensor:
    _, h, w = image.shape
    ch = max(1, int(round(keep * h)))
    cw = max(1, int(round(keep * w)))
    if ch >= h and cw >= w:
        return image
    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    window = image[:, top:top + ch, left:left + cw]
    return F.interpolate(window.unsqueeze(0), size=(h, w), mode="bilinear",
                         align_corners=False).squeeze(0).clamp(0.0, 1.0)


def color_jitter(image: torch.Tensor, delta: float, seed: int = 0) -> torch.Tensor:
    if delta <= 0.0:
        return image
    rng = np.random.default_rng(seed)
    brightness = float(rng.uniform(-delta, delta))
    contrast = float(rng.uniform(-delta, delta))
    out = (image - 0.5) * (1.0 + contrast) + 0.5 + brightness
    return out.clamp(0.0, 1.0)


def _grid_sample(image: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    return F.grid_sample(image.unsqueeze(0), grid, mode="bilinear",
                         padding_mode="border", align_corners=False).squeeze(0)


def affine_rotate(image: torch.Tensor, degrees: float, seed: int = 0) -> torch.Tensor:
    if degrees == 0.0:
        return image
    rng = np.random.default_rng(seed)
    angle = math.radians(degrees) * (1.0 if rng.random() < 0.5 else -1.0)
    cos, sin = math.cos(angle), math.sin(angle)
    theta = torch.tensor([[cos, -sin, 0.0], [sin, cos, 0.0]], dtype=image.dtype)
    grid = F.affine_grid(theta.unsqueeze(0), (1, *image.shape), align_corners=False)
    return _grid_sample(image, grid).clamp(0.0, 1.0)


_DONOR_POOL_SIZE = 64
_donor_pools: dict = {}


def _donor(image: torch.Tensor, seed: int) -> torch.Tensor:
    """Seed-indexed donor from a fixed procedural pool (cached per resolution)."""
    resolution = image.shape[-1]
    pool = _donor_pools.get(resolution)
    if pool is None:
        pool = [make_toy_image(stable_seed("attack-donor", resolution, i), resolution)
                for i in range(_DONOR_POOL_SIZE)]
        _donor_pools[resolution] = pool
    return pool[seed % _DONOR_POOL_SIZE].to(image.dtype)


def mixup(image: torch.Tensor, blend: float, seed: int = 0) -> torch.Tensor:
    """Blend toward an unrelated donor image; a content-replacement proxy."""
    donor = _donor(image, seed)
    return ((1.0 - blend) * image + blend * donor).clamp(0.0, 1.0)


def patch_swap(image: torch.Tensor, area_fraction: float, seed: int = 0) -> torch.Tensor:
    """Replace a rectangle with donor content, covering the given area share."""
    _, h, w = image.shape
    rng = np.random.default_rng(seed)
    aspect = float(rng.uniform(0.5, 2.0))
    target = area_fraction * h * w
    ph = min(h, max(1, int(round(math.sqrt(target * aspect)))))
    pw = min(w, max(1, int(round(target / ph))))
    top = int(rng.integers(0, h - ph + 1))
    left = int(rng.integers(0, w - pw + 1))
    donor = _donor(image, seed)
    mask = torch.zeros(1, h, w, dtype=image.dtype)
    mask[:, top:top + ph, left:left + pw] = 1.0
    return image * (1.0 - mask) + donor * mask


def elastic_warp(image: torch.Tensor, displacement_px: float, seed: int = 0) -> torch.Tensor:
    """Smooth random displacement field with the given peak magnitude."""
    _, h, w = image.shape
    g = torch_generator(seed)
    coarse = torch.randn(1, 2, 4, 4, generator=g, dtype=image.dtype)
    field = F.interpolate(coarse, size=(h, w), mode="bicubic", align_corners=False)
    peak = field.abs().amax().clamp_min(1e-8)
    field = field / peak * displacement_px
    ys = torch.linspace(-1.0, 1.0, h, dtype=image.dtype)
    xs = torch.linspace(-1.0, 1.0, w, dtype=image.dtype)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    # displacement is in pixels; grid coordinates span 2/(size) per pixel
    gx = gx + field[0, 0] * (2.0 / w)
    gy = gy + field[0, 1] * (2.0 / h)
    grid = torch.stack([gx, gy], dim=-1).unsqueeze(0)
    return _grid_sample(image, grid).clamp(0.0, 1.0)


def external_attack(image: torch.Tensor, strength: float, seed: int,
                    cmd_template: str) -> torch.Tensor:
    """Run a plug-in generator: command gets {input}/{output} paths, {strength}."""
    from .data import load_image, save_image

    with tempfile.TemporaryDirectory(prefix="latentseal-ext-") as tmp:
        src = Path(tmp) / "in.png"
        dst = Path(tmp) / "out.png"
        save_image(image, src)
        cmd = cmd_template.format(input=src, output=dst, strength=strength)
        subprocess.run(cmd, shell=True, check=True, capture_output=True)
        if not dst.exists():
            raise ValidationError(f"external attack produced no output: {cmd}")
        return load_image(dst, resolution=image.shape[-1]).to(image.dtype)


_TRANSFORMS = {
    "jpeg": jpeg_roundtrip,
    "noise": gaussian_noise,
    "crop": crop_resize,
    "jitter": color_jitter,
    "affine": affine_rotate,
    "mixup": mixup,
    "patch_swap": patch_swap,
    "elastic_warp": elastic_warp,
}


class _StraightThrough(torch.autograd.Function):
    """Forward = exact transform, backward = identity."""

    @staticmethod
    def forward(ctx, image, transform):
        with torch.no_grad():
            return transform(image.detach())

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def _run_one(image: torch.Tensor, spec: AttackSpec, param: float, seed: int,
             registry: AttackRegistry, surrogate: bool) -> torch.Tensor:
    if spec.name == "external":
        fn = lambda img: external_attack(img, param, seed, registry.external_cmd)
    else:
        transform = _TRANSFORMS.get(spec.name)
        if transform is None:
            raise ValidationError(f"no transform registered for attack {spec.name!r}")
        fn = lambda img: transform(img, param, seed)
    if surrogate and not spec.has_surrogate:
        return _StraightThrough.apply(image, fn)
    return fn(image)


def _compose(image: torch.Tensor, selected, strengths, registry: AttackRegistry,
             seed: int, surrogate: bool) -> torch.Tensor:
    selected = np.asarray(selected).ravel()
    strengths = np.asarray(strengths, dtype=np.float64).ravel()
    if len(selected) != len(registry) or len(strengths) != len(registry):
        raise ValidationError(
            f"action length {len(selected)} != registry length {len(registry)}"
        )
    out = image
    for idx, spec in enumerate(registry):
        if not selected[idx]:
            continue
        param = map_params(spec, strengths[idx])
        sub_seed = stable_seed("attack", seed, spec.id, spec.name)
        try:
            out = _run_one(out, spec, param, sub_seed, registry, surrogate)
        except Exception as exc:  # per-attack fallback keeps the pipeline alive
            logger.warning("attack %s failed (%s); falling back to identity",
                           spec.name, exc)
    return out


def apply(image: torch.Tensor, action, registry: AttackRegistry,
          seed: int = 0) -> torch.Tensor:
    """Exact composition of the selected attacks in registry order.

    `action` needs `.selected` and `.strengths` vectors of registry length.
    An empty selection returns the input unchanged.
    """
    return _compose(image, action.selected, action.strengths, registry, seed,
                    surrogate=False)


def apply_surrogate(image: torch.Tensor, action, registry: AttackRegistry,
                    seed: int = 0) -> torch.Tensor:
    """Same composition with gradients: quantizing steps go straight-through."""
    return _compose(image, action.selected, action.strengths, registry, seed,
                    surrogate=True)


def apply_single(image: torch.Tensor, registry: AttackRegistry, name: str,
                 tau: float, seed: int = 0) -> torch.Tensor:
    """Convenience: one named attack at normalized strength tau (exact path)."""
    idx = registry.names.index(name)
    selected = np.zeros(len(registry), dtype=np.int64)
    strengths = np.full(len(registry), 0.5)
    selected[idx] = 1
    strengths[idx] = tau
    return _compose(image, selected, strengths, registry, seed, surrogate=False)
