"""Command-line interface.

Commands: train, embed, extract, verify, attack, evaluate, calibrate, report.
Secret keys come from an environment variable (default LATENTSEAL_KEY) or an
interactive prompt and are never written to any output artifact. Exit codes:
0 success / genuine, 1 operational error, 2 fake verdict.
"""

from __future__ import annotations

import argparse
import getpass
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import attacks as attack_engine
from .config import echo_config, load_config, merge_config
from .data import load_image, make_toy_dataset, save_image, scan_image_dir
from .directions import Message
from .evaluation import detection_pools, evaluate, watermark_dataset, write_report
from .extractor import calibrate_threshold
from .training import build_trainer, load_system
from .utils import ConfigurationError, ValidationError, bits_to_hex, hex_to_bits, stable_seed

logger = logging.getLogger("latentseal")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_FAKE = 2


def _get_key(args) -> str:
    value = os.environ.get(args.key_env, "")
    if value:
        return value
    value = getpass.getpass(f"secret key (env {args.key_env} unset): ")
    if not value:
        raise ValidationError("empty secret key")
    return value


def _load_cfg(args) -> dict:
    if getattr(args, "config", None):
        return load_config(args.config)
    return merge_config({})


def _dataset_images(args, resolution: int):
    if args.synthetic:
        return make_toy_dataset(args.synthetic, resolution, seed=args.data_seed)
    if not args.dataset:
        raise ValidationError("provide --dataset DIR or --synthetic N")
    manifest = scan_image_dir(args.dataset, resolution)
    import torch

    return torch.stack([load_image(p, resolution) for p in manifest.paths])


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    key = _get_key(args)
    trainer = build_trainer(cfg, key)
    images = _dataset_images(args, cfg["backbone"]["resolution"])
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out_dir)
    result = trainer.train(images, out_dir=out_dir)
    (out_dir / "metrics.json").write_text(
        json.dumps(result["history"], indent=2, sort_keys=True) + "\n")
    logger.info("training done; final checkpoint at %s", result["checkpoint"])
    return EXIT_OK


def _resolve_message(args, cfg, system) -> Message:
    mode = args.message or ("key" if cfg["embed"]["message_mode"] == "key_derived"
                            else "random")
    n_bits = system.n_bits
    if mode == "random":
        return Message.random(n_bits, stable_seed("cli-message", args.seed))
    if mode == "key":
        rng = np.random.default_rng(stable_seed("key-derived-message",
                                                system.fingerprint))
        return Message(bits=rng.integers(0, 2, size=n_bits))
    if mode.startswith("hex:"):
        return Message(bits=hex_to_bits(mode[4:], n_bits))
    raise ValidationError(f"unknown --message value {mode!r}")


def _load_image_for(system, path):
    img = load_image(path)
    r = system.resolution
    if img.shape[-2:] != (r, r):
        logger.info("resizing %s from %s to %dx%d", path, tuple(img.shape[-2:]), r, r)
        img = load_image(path, resolution=r)
    return img


def cmd_embed(args) -> int:
    key = _get_key(args)
    system, cfg, _ = load_system(args.checkpoint, key)
    message = _resolve_message(args, cfg, system)
    image = _load_image_for(system, args.input)
    marked = system.embed(image, message)
    save_image(marked, args.output)
    sidecar = Path(args.sidecar or (str(args.output) + ".wm.json"))
    sidecar.write_text(json.dumps({
        "n_bits": len(message),
        "bits_hex": bits_to_hex(message.bits),
        "key_fingerprint": system.fingerprint,
    }, sort_keys=True) + "\n")
    logger.info("wrote %s and sidecar %s", args.output, sidecar)
    return EXIT_OK


def cmd_extract(args) -> int:
    key = _get_key(args)
    system, _, _ = load_system(args.checkpoint, key)
    image = _load_image_for(system, args.input)
    message = system.extract(image)
    print(bits_to_hex(message.bits))
    return EXIT_OK


def cmd_verify(args) -> int:
    key = _get_key(args)
    system, _, _ = load_system(args.checkpoint, key)
    try:
        sidecar = json.loads(Path(args.sidecar).read_text())
        reference = Message(bits=hex_to_bits(sidecar["bits_hex"], sidecar["n_bits"]))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ValidationError(f"corrupt sidecar {args.sidecar}: {exc}") from exc
    if sidecar.get("key_fingerprint") not in (None, system.fingerprint):
        logger.warning("sidecar fingerprint differs from the supplied key")
    image = _load_image_for(system, args.input)
    verdict = system.detect(image, reference,
                            threshold=args.threshold)
    print(f"ber={verdict.ber:.4f} lambda={verdict.threshold:.2f} "
          f"verdict={'FAKE' if verdict.is_fake else 'GENUINE'}")
    return EXIT_FAKE if verdict.is_fake else EXIT_OK


def cmd_attack(args) -> int:
    cfg = _load_cfg(args)
    registry = attack_engine.registry_from_config(cfg["attacks"])
    image = load_image(args.input)
    names = [n for n in (args.attacks or "").split(",") if n]
    strengths = [float(s) for s in (args.strengths or "").split(",") if s]
    if len(strengths) not in (0, len(names)):
        raise ValidationError("--strengths must match --attacks in length")
    out = image
    for i, name in enumerate(names):
        tau = strengths[i] if strengths else 0.5
        out = attack_engine.apply_single(out, registry, name, tau,
                                         seed=stable_seed("cli-attack", args.seed, i))
    save_image(out, args.output)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    key = _get_key(args)
    system, cfg, _ = load_system(args.checkpoint, key)
    registry = attack_engine.registry_from_config(cfg["attacks"])
    images = _dataset_images(args, system.resolution)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out_dir)
    evaluate(system, images, registry, out_dir=out_dir, seed=args.seed,
             plot_dpi=cfg["report"]["plot_dpi"])
    logger.info("report written to %s", out_dir)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    key = _get_key(args)
    system, cfg, _ = load_system(args.checkpoint, key)
    registry = attack_engine.registry_from_config(cfg["attacks"])
    images = _dataset_images(args, system.resolution)
    marked, messages = watermark_dataset(system, images, args.seed)
    pools = detection_pools(system, marked, messages, registry, seed=args.seed)
    benign = [b for b, fake in pools if not fake]
    malicious = [b for b, fake in pools if fake]
    lam = calibrate_threshold(benign, malicious)
    print(f"lambda={lam:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    report = json.loads(Path(args.metrics).read_text())
    write_report(report, args.out, plot_dpi=args.dpi)
    logger.info("report rendered to %s", args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentseal",
        description="semi-fragile latent-space watermarking for tamper detection")
    parser.add_argument("--key-env", default="LATENTSEAL_KEY",
                        help="environment variable holding the secret key")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_dataset_args(p):
        p.add_argument("--dataset", help="directory of RGB images")
        p.add_argument("--synthetic", type=int, default=0,
                       help="use N procedurally generated images instead")
        p.add_argument("--data-seed", type=int, default=0)

    p = sub.add_parser("train", help="run adversarial training")
    p.add_argument("--config", help="YAML config file")
    add_dataset_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="watermark one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--message", help="random | key | hex:<digits>")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sidecar", help="sidecar path (default <out>.wm.json)")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("extract", help="print the recovered message bits")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("verify", help="check an image against its sidecar")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sidecar", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--threshold", type=float, default=None,
                   help="override detector lambda")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("attack", help="apply registry attacks to an image")
    p.add_argument("--config", help="YAML config file (for the registry)")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--attacks", help="comma-separated attack names")
    p.add_argument("--strengths", help="comma-separated strengths in [0,1]")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="quality/BRA/detection report")
    p.add_argument("--checkpoint", required=True)
    add_dataset_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("calibrate", help="grid-search the detection threshold")
    p.add_argument("--checkpoint", required=True)
    add_dataset_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("report", help="re-render tables/plots from report.json")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dpi", type=int, default=110)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigurationError, ValidationError) as exc:
        logger.error("%s", exc)
        return EXIT_ERROR
    except FileNotFoundError as exc:
        logger.error("file not found: %s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
