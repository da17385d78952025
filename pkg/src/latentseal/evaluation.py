"""Evaluation harness: quality metrics, BRA sweeps, detection scores, reports.

`evaluate` watermarks every test image with fresh seeded messages, measures
PSNR/SSIM against the originals, sweeps each registry attack over a strength
grid measuring bit recovery accuracy, and scores detection over clean,
benign-attacked, and malicious-attacked pools. Machine-readable outputs
(JSON and a tab-separated table) are deterministic given checkpoint,
dataset, and seed; plots are rendered alongside them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import attacks as attack_engine
from .directions import Message
from .extractor import ber, calibrate_threshold
from .metrics import bra, detection_scores, psnr, ssim
from .pipeline import WatermarkSystem
from .utils import ValidationError, stable_seed

DEFAULT_TAUS = (0.25, 0.5, 0.75)


@dataclass
class QualityReport:
    psnr: float
    ssim: float


@dataclass
class DetectionReport:
    accuracy: float
    f1: float
    bra_per_attack: dict = field(default_factory=dict)


def watermark_dataset(system: WatermarkSystem, images: torch.Tensor, seed: int,
                      batch_size: int = 32):
    """Embed a fresh random message per image; returns (marked, messages)."""
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValidationError("expected a non-empty (N, 3, R, R) image stack")
    n = images.shape[0]
    messages = [Message.random(system.n_bits, stable_seed("eval-msg", seed, i))
                for i in range(n)]
    marked = []
    with torch.no_grad():
        for start in range(0, n, batch_size):
            chunk = images[start:start + batch_size]
            bits = torch.from_numpy(
                np.stack([m.bits for m in messages[start:start + batch_size]])
            ).to(torch.float32)
            rendered, _, _ = system.embed_batch(chunk, bits)
            marked.append(rendered)
    return torch.cat(marked), messages


def quality_report(originals: torch.Tensor, marked: torch.Tensor) -> QualityReport:
    n = originals.shape[0]
    psnrs = [psnr(originals[i], marked[i]) for i in range(n)]
    ssims = [ssim(originals[i], marked[i]) for i in range(n)]
    return QualityReport(psnr=float(np.mean(psnrs)), ssim=float(np.mean(ssims)))


def _extract_bers(system: WatermarkSystem, images: torch.Tensor,
                  messages, batch_size: int = 64) -> list:
    bers = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            logits = system.extract_logits(images[start:start + batch_size])
            for row, message in zip(logits, messages[start:start + batch_size]):
                bers.append(ber(Message.from_logits(row), message))
    return bers


def clean_bra(system: WatermarkSystem, marked: torch.Tensor, messages) -> float:
    return 1.0 - float(np.mean(_extract_bers(system, marked, messages)))


def bra_sweep(system: WatermarkSystem, marked: torch.Tensor, messages,
              registry: attack_engine.AttackRegistry, taus=DEFAULT_TAUS,
              seed: int = 0) -> dict:
    """Mean BRA per attack per strength (exact attack path)."""
    out: dict = {}
    n = marked.shape[0]
    for spec in registry:
        out[spec.name] = {}
        for tau in taus:
            attacked = torch.stack([
                attack_engine.apply_single(
                    marked[i], registry, spec.name, tau,
                    seed=stable_seed("eval-attack", seed, spec.name, tau, i))
                for i in range(n)
            ])
            bers = _extract_bers(system, attacked, messages)
            out[spec.name][float(tau)] = 1.0 - float(np.mean(bers))
    return out


def detection_pools(system: WatermarkSystem, marked: torch.Tensor, messages,
                    registry: attack_engine.AttackRegistry, seed: int = 0):
    """(ber, ground_truth_is_fake) pairs over clean/benign/malicious pools.

    Each image contributes one clean sample, one benign-attacked sample, and
    one malicious-attacked sample (seeded attack and strength choices).
    """
    n = marked.shape[0]
    pairs = []
    clean_bers = _extract_bers(system, marked, messages)
    pairs.extend((b, False) for b in clean_bers)
    for kind, is_fake in (("benign", False), ("malicious", True)):
        idx = registry.indices(kind)
        if not idx:
            continue
        attacked = []
        for i in range(n):
            rng = np.random.default_rng(stable_seed("eval-pool", seed, kind, i))
            spec = registry[int(rng.choice(idx))]
            tau = float(rng.uniform(0.0, 1.0))
            attacked.append(attack_engine.apply_single(
                marked[i], registry, spec.name, tau,
                seed=stable_seed("eval-pool-attack", seed, kind, i)))
        bers = _extract_bers(system, torch.stack(attacked), messages)
        pairs.extend((b, is_fake) for b in bers)
    return pairs


def evaluate(system: WatermarkSystem, images: torch.Tensor,
             registry: attack_engine.AttackRegistry, out_dir=None, seed: int = 0,
             taus=DEFAULT_TAUS, plot_dpi: int = 110) -> dict:
    """Full harness pass; returns the report dict and writes serializations."""
    marked, messages = watermark_dataset(system, images, seed)
    quality = quality_report(images, marked)
    sweep = bra_sweep(system, marked, messages, registry, taus=taus, seed=seed)
    clean = clean_bra(system, marked, messages)

    pools = detection_pools(system, marked, messages, registry, seed=seed)
    lam = system.detector_lambda
    verdicts = [(b > lam, truth) for b, truth in pools]
    accuracy, f1 = detection_scores(verdicts)
    benign_bers = [b for b, truth in pools if not truth]
    fake_bers = [b for b, truth in pools if truth]
    lam_cal = calibrate_threshold(benign_bers, fake_bers) if fake_bers else lam
    verdicts_cal = [(b > lam_cal, truth) for b, truth in pools]
    acc_cal, f1_cal = detection_scores(verdicts_cal)

    bra_table = {name: float(np.mean(list(rows.values()))) for name, rows in sweep.items()}
    detection = DetectionReport(accuracy=accuracy, f1=f1, bra_per_attack=bra_table)

    def _kind_mean(kind: str) -> float:
        names = [s.name for s in registry if s.kind == kind]
        return float(np.mean([bra_table[n] for n in names])) if names else float("nan")

    report = {
        "n_images": int(images.shape[0]),
        "quality": {"psnr": quality.psnr, "ssim": quality.ssim},
        "clean_bra": clean,
        "bra": sweep,
        "bra_mean_benign": _kind_mean("benign"),
        "bra_mean_malicious": _kind_mean("malicious"),
        "detection": {
            "lambda": lam, "accuracy": accuracy, "f1": f1,
            "lambda_calibrated": lam_cal, "accuracy_calibrated": acc_cal,
            "f1_calibrated": f1_cal,
        },
    }
    if out_dir is not None:
        write_report(report, out_dir, plot_dpi=plot_dpi)
    return report


def render_report_text(report: dict) -> str:
    """Tab-separated metric table: one row per metric/attack pair."""
    lines = ["metric\tattack\tvalue"]
    lines.append(f"psnr\t-\t{report['quality']['psnr']:.6f}")
    lines.append(f"ssim\t-\t{report['quality']['ssim']:.6f}")
    lines.append(f"clean_bra\t-\t{report['clean_bra']:.6f}")
    for name in report["bra"]:
        for tau, value in report["bra"][name].items():
            lines.append(f"bra@tau={float(tau):.2f}\t{name}\t{value:.6f}")
    det = report["detection"]
    lines.append(f"accuracy@lambda={det['lambda']:.2f}\t-\t{det['accuracy']:.6f}")
    lines.append(f"f1@lambda={det['lambda']:.2f}\t-\t{det['f1']:.6f}")
    lines.append(f"lambda_calibrated\t-\t{det['lambda_calibrated']:.6f}")
    lines.append(f"accuracy_calibrated\t-\t{det['accuracy_calibrated']:.6f}")
    lines.append(f"f1_calibrated\t-\t{det['f1_calibrated']:.6f}")
    return "\n".join(lines) + "\n"


def write_report(report: dict, out_dir, plot_dpi: int = 110) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out_dir / "report.txt").write_text(render_report_text(report))
    _plot_bra(report, out_dir / "bra_per_attack.png", plot_dpi)
    return out_dir


def _plot_bra(report: dict, path: Path, dpi: int) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    sweep = report["bra"]
    names = list(sweep)
    taus = sorted({float(t) for rows in sweep.values() for t in rows})
    x = np.arange(len(names), dtype=float)
    width = 0.8 / max(len(taus), 1)
    fig, ax = plt.subplots(figsize=(max(6, len(names) * 1.1), 4))
    for j, tau in enumerate(taus):
        vals = [sweep[n].get(tau, sweep[n].get(str(tau), float("nan"))) for n in names]
        ax.bar(x + j * width, vals, width, label=f"tau={tau:.2f}")
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("bit recovery accuracy")
    ax.set_ylim(0, 1.05)
    ax.axhline(0.5, color="gray", lw=0.8, ls="--")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=dpi)
    plt.close(fig)
