"""Image quality and detection metrics: PSNR, SSIM, BRA, accuracy/F1."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from .extractor import ber
from .utils import ValidationError

PSNR_CAP_DB = 100.0
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def _to_f64(image) -> torch.Tensor:
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(np.ascontiguousarray(image))
    return image.detach().to(torch.float64)


def psnr(x, y) -> float:
    """10*log10(1/MSE) for images in [0, 1]; identical images cap at 100 dB."""
    x, y = _to_f64(x), _to_f64(y)
    if x.shape != y.shape:
        raise ValidationError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    mse = float(((x - y) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, -10.0 * math.log10(mse))


def _gaussian_window(dtype) -> torch.Tensor:
    half = (_SSIM_WINDOW - 1) / 2.0
    coords = torch.arange(_SSIM_WINDOW, dtype=dtype) - half
    g = torch.exp(-(coords**2) / (2.0 * _SSIM_SIGMA**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(x, y, data_range: float = 1.0) -> float:
    """Gaussian-windowed SSIM (11x11, sigma 1.5, K1=0.01, K2=0.03).

    Windows are valid-mode (no padding); channels are averaged.
    """
    x, y = _to_f64(x), _to_f64(y)
    if x.shape != y.shape:
        raise ValidationError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.ndim == 2:
        x, y = x.unsqueeze(0), y.unsqueeze(0)
    if x.ndim != 3:
        raise ValidationError("ssim expects (H, W) or (C, H, W) images")
    c, h, w = x.shape
    if h < _SSIM_WINDOW or w < _SSIM_WINDOW:
        raise ValidationError(f"image smaller than the {_SSIM_WINDOW}-pixel SSIM window")

    kernel = _gaussian_window(x.dtype).expand(c, 1, _SSIM_WINDOW, _SSIM_WINDOW)
    conv = lambda t: F.conv2d(t.unsqueeze(0), kernel, groups=c).squeeze(0)
    mu_x, mu_y = conv(x), conv(y)
    sig_x = conv(x * x) - mu_x**2
    sig_y = conv(y * y) - mu_y**2
    sig_xy = conv(x * y) - mu_x * mu_y
    c1 = (_SSIM_K1 * data_range) ** 2
    c2 = (_SSIM_K2 * data_range) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * sig_xy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sig_x + sig_y + c2)
    return float((num / den).mean())


def bra(m1, m2) -> float:
    """Bit recovery accuracy: 1 - BER."""
    return 1.0 - ber(m1, m2)


def detection_scores(verdicts) -> tuple[float, float]:
    """(accuracy, F1) over (is_fake, ground_truth) pairs; positive class = fake.

    F1 is 0 by convention when precision + recall is 0.
    """
    pairs = list(verdicts)
    if not pairs:
        raise ValidationError("detection_scores needs at least one verdict")
    tp = sum(1 for pred, truth in pairs if pred and truth)
    tn = sum(1 for pred, truth in pairs if not pred and not truth)
    fp = sum(1 for pred, truth in pairs if pred and not truth)
    fn = sum(1 for pred, truth in pairs if not pred and truth)
    accuracy = (tp + tn) / len(pairs)
    precision = tp / (tp + fp) if (tp + fp) else 0.0
    recall = tp / (tp + fn) if (tp + fn) else 0.0
    f1 = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
    return accuracy, f1
