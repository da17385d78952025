"""Semi-fragile latent-space image watermarking toolkit.

Embeds key-derived, message-bearing perturbations into a spherical semantic
latent space, trains the embedder/extractor against an RL attacker that
composes combinatorial image manipulations, and flags tampering through the
bit-error rate of the recovered message.
"""

__version__ = "0.1.0"

from .utils import ValidationError, ConfigurationError, DivergenceError

__all__ = ["ValidationError", "ConfigurationError", "DivergenceError", "__version__"]
