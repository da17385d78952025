"""End-to-end watermarking system: backbone + directions + embedder + extractor.

Holds everything needed to embed, extract, and issue verdicts for a single
secret key. Training mutates the module weights in place; inference paths
run under no_grad with a cached direction set.
"""

from __future__ import annotations

import torch

from .backbone import BackboneConfig, SemanticBackbone
from .directions import (
    DirectionGenerator,
    DirectionSet,
    Message,
    ProjectionTargets,
    generate_directions,
    identity_directions,
)
from .embedder import EmbedderConfig, WatermarkEmbedder, fuse_message_directions
from .extractor import WatermarkExtractor, ber, logits_to_message, verdict_from_ber
from .utils import ValidationError, as_batch, key_fingerprint


class WatermarkSystem:
    def __init__(self, backbone: SemanticBackbone, direction_gen: DirectionGenerator,
                 embedder: WatermarkEmbedder, extractor: WatermarkExtractor,
                 targets: ProjectionTargets, key: str, detector_lambda: float = 0.8,
                 naive_directions: bool = False):
        if not key:
            raise ValidationError("secret key must be non-empty")
        self.backbone = backbone
        self.direction_gen = direction_gen
        self.embedder = embedder
        self.extractor = extractor
        self.targets = targets
        self.detector_lambda = detector_lambda
        self.naive_directions = naive_directions
        self.key_feature = backbone.encode_key(key)
        self.fingerprint = key_fingerprint(key)
        self._cached_directions: DirectionSet | None = None

    # -- directions ---------------------------------------------------------

    def directions(self, grad: bool = False) -> DirectionSet:
        """Current direction set; pass grad=True inside training graphs."""
        if self.naive_directions:
            return identity_directions(self.direction_gen.feature_dim,
                                       self.direction_gen.n_bits)
        if grad:
            return generate_directions(self.key_feature, self.direction_gen,
                                       self.fingerprint)
        if self._cached_directions is None:
            with torch.no_grad():
                self._cached_directions = generate_directions(
                    self.key_feature, self.direction_gen, self.fingerprint)
        return self._cached_directions

    def refresh_directions(self) -> None:
        self._cached_directions = None

    @property
    def n_bits(self) -> int:
        return self.direction_gen.n_bits

    @property
    def resolution(self) -> int:
        return self.backbone.cfg.input_resolution

    # -- embedding ----------------------------------------------------------

    def embed_batch(self, images: torch.Tensor, bits: torch.Tensor,
                    grad: bool = False):
        """Watermark a batch; returns (x_watermarked, q, f_original)."""
        directions = self.directions(grad=grad)
        f = self.backbone.encode_image(images)
        fused = fuse_message_directions(bits, directions, self.targets)
        q = self.embedder.perturb(f, fused)
        rendered = self.embedder.render(as_batch(images), q)
        return rendered, q, f

    def embed(self, image, message: Message) -> torch.Tensor:
        """Single-image convenience; returns the watermarked (3, R, R) tensor."""
        with torch.no_grad():
            bits = torch.from_numpy(message.bits).unsqueeze(0)
            rendered, _, _ = self.embed_batch(as_batch(image), bits)
        return rendered.squeeze(0)

    # -- extraction / detection ---------------------------------------------

    def extract_logits(self, images: torch.Tensor, grad: bool = False,
                       directions: DirectionSet | None = None) -> torch.Tensor:
        directions = directions if directions is not None else self.directions(grad=grad)
        f = self.backbone.encode_image(images)
        return self.extractor(f, directions)

    def extract(self, image) -> Message:
        """Recover the message (with logits) from a possibly attacked image."""
        with torch.no_grad():
            logits = self.extract_logits(as_batch(image))
        return logits_to_message(logits.squeeze(0))

    def detect(self, image, reference_message: Message,
               threshold: float | None = None):
        """BER-threshold verdict against the known original message."""
        lam = self.detector_lambda if threshold is None else threshold
        if not (0.0 <= lam <= 1.0):
            raise ValidationError("detection threshold must lie in [0, 1]")
        recovered = self.extract(image)
        return verdict_from_ber(ber(recovered, reference_message), lam, recovered)

    # -- persistence hooks ---------------------------------------------------

    def named_modules_for_checkpoint(self) -> dict:
        return {
            "direction_gen": self.direction_gen,
            "perturb_net": self.embedder.perturb_net,
            "decoder": self.embedder.decoder,
            "extractor": self.extractor,
        }


def build_system(cfg: dict, key: str) -> WatermarkSystem:
    """Assemble a WatermarkSystem from a resolved configuration mapping."""
    bb_cfg = BackboneConfig(
        feature_dim=cfg["backbone"]["feature_dim"],
        mode=cfg["backbone"]["mode"],
        input_resolution=cfg["backbone"]["resolution"],
        seed=cfg["backbone"]["seed"],
        hidden_dim=cfg["backbone"]["hidden_dim"],
        pool_grid=cfg["backbone"]["pool_grid"],
        weights_path=cfg["backbone"]["weights_path"],
    )
    backbone = SemanticBackbone(bb_cfg)
    n_bits = cfg["codec"]["message_bits"]
    targets = ProjectionTargets(xi_one=cfg["codec"]["xi_one"],
                                xi_zero=cfg["codec"]["xi_zero"])
    dir_gen = DirectionGenerator(bb_cfg.feature_dim, n_bits,
                                 hidden_dim=cfg["codec"]["generator_hidden"],
                                 seed=cfg["backbone"]["seed"])
    emb_cfg = EmbedderConfig(
        perturb_scale=cfg["embed"]["perturb_scale"],
        residual_mode=cfg["embed"]["residual_mode"],
        residual_scale=cfg["embed"]["residual_scale"],
        perturb_hidden=cfg["embed"]["perturb_hidden"],
        decoder_arch=cfg["embed"]["decoder_arch"],
        decoder_grid=cfg["embed"]["decoder_grid"],
        decoder_base_channels=cfg["embed"]["decoder_base_channels"],
        passthrough_gain=cfg["embed"]["passthrough_gain"],
    )
    flags = set(cfg["train"]["ablation_flags"])
    with torch.no_grad():
        if "naive_embedding" in flags:
            rows = identity_directions(bb_cfg.feature_dim, n_bits).rows
        else:
            rows = dir_gen(backbone.encode_key(key))
        span_projection = rows.transpose(0, 1) @ rows
    embedder = WatermarkEmbedder(bb_cfg.feature_dim, bb_cfg.input_resolution,
                                 emb_cfg, seed=cfg["backbone"]["seed"],
                                 span_projection=span_projection)
    extractor = WatermarkExtractor(n_bits, bb_cfg.feature_dim,
                                   arch=cfg["extractor"]["arch"],
                                   hidden_dim=cfg["extractor"]["hidden"],
                                   gain=cfg["extractor"]["gain"],
                                   seed=cfg["backbone"]["seed"])
    return WatermarkSystem(backbone, dir_gen, embedder, extractor, targets, key,
                           detector_lambda=cfg["detector"]["lambda"],
                           naive_directions="naive_embedding" in flags)
