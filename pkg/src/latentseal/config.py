"""Run configuration: defaults, YAML loading, validation, echoing.

Every section has documented defaults; unknown keys are rejected with a
best-effort line reference into the source file. The fully-resolved
configuration is echoed into every output directory so runs are auditable.
"""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .utils import ConfigurationError

ABLATION_FLAGS = {
    "no_attacker",       # drop the attacker agent entirely
    "fixed_attack",      # one fixed attack type, fixed strength
    "fixed_sequence",    # every attack in registry order, fixed strength
    "random_combo",      # random selections and strengths, no learning
    "single_ramp",       # one attack, strength ramping over epochs
    "progressive",       # progressively unlock more attacks per epoch
    "single_learnable",  # one attack, policy controls only the strength
    "fixed_curriculum",  # scripted schedule, no adaptation
    "no_proximity",      # zero the proximity reward
    "no_curiosity",      # zero the curiosity reward
    "fixed_directions",  # freeze the direction generator at init
    "naive_embedding",   # canonical-basis directions (no directional coding)
}

_ATTACK_ENTRY_KEYS = {"name", "kind", "min", "max", "enabled"}

DEFAULTS: dict = {
    "backbone": {
        "mode": "toy",              # {toy, pretrained}
        "feature_dim": 512,
        "resolution": None,         # default 64 for toy, 224 for pretrained
        "seed": 0,
        "hidden_dim": 256,
        "pool_grid": 16,
        "weights_path": None,       # TorchScript module, pretrained mode
    },
    "codec": {
        "message_bits": 512,
        "xi_one": 0.1,
        "xi_zero": -0.1,
        "generator_hidden": 256,
    },
    "embed": {
        "perturb_scale": 0.05,
        "residual_mode": True,
        "residual_scale": 0.08,
        "perturb_hidden": 512,
        "decoder_arch": "block",   # {block, conv}
        "decoder_grid": 16,
        "decoder_base_channels": 8,
        "passthrough_gain": 12.0,
        "message_mode": "random_sidecar",  # {random_sidecar, key_derived}
    },
    "loss": {"alpha": 1.0, "beta": 4.0, "gamma": 1.0},
    "attacks": {
        "external_cmd": None,  # command template with {input}/{output}/{strength}
        "entries": None,       # None -> built-in registry; else list of entries
    },
    "attacker": {
        "delta": 1.0,
        "nu": 0.1,
        "epsilon": 1e-6,
        "o": 0.01,
        "r": 0.01,
        "memory_capacity": 1024,
        "action_penalty_sign": "penalty",  # {penalty, bonus}
        "memory_lambda": None,             # None -> detector lambda
    },
    "train": {
        "epochs": 50,
        "batch_size": 16,
        "learning_rate": 1e-4,
        "optimizer": "adam",
        "seed": 0,
        "benign_malicious_ratio": 0.5,
        "attacker_every_k": 1,
        "ablation_flags": [],
    },
    "detector": {"lambda": 0.8},
    "extractor": {"arch": "projection", "hidden": 256, "gain": 20.0},
    "report": {"plot_dpi": 110},
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def _reject_unknown(user: dict, schema: dict, path: str = "") -> None:
    for key, value in user.items():
        where = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigurationError(f"unknown config key: {where}")
        if isinstance(schema[key], dict) and isinstance(value, dict):
            _reject_unknown(value, schema[key], where)


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigurationError(message)


def validate_config(cfg: dict) -> dict:
    """Check ranges and cross-field constraints; returns the config."""
    bb, codec, train = cfg["backbone"], cfg["codec"], cfg["train"]
    _require(bb["mode"] in ("toy", "pretrained"), "backbone.mode must be toy|pretrained")
    if bb["resolution"] is None:
        bb["resolution"] = 64 if bb["mode"] == "toy" else 224
    _require(bb["feature_dim"] >= 1, "backbone.feature_dim must be positive")
    _require(bb["resolution"] >= 8, "backbone.resolution must be >= 8")
    _require(codec["message_bits"] >= 1, "codec.message_bits must be positive")
    _require(codec["message_bits"] <= bb["feature_dim"],
             "codec.message_bits must not exceed backbone.feature_dim")
    _require(codec["xi_one"] > codec["xi_zero"], "codec.xi_one must exceed codec.xi_zero")
    _require(-1.0 < codec["xi_zero"] and codec["xi_one"] < 1.0,
             "projection targets must lie in (-1, 1)")
    _require(train["epochs"] >= 1 and train["batch_size"] >= 1,
             "train.epochs and train.batch_size must be >= 1")
    _require(train["learning_rate"] > 0, "train.learning_rate must be positive")
    _require(0.0 <= train["benign_malicious_ratio"] <= 1.0,
             "train.benign_malicious_ratio must lie in [0, 1]")
    _require(train["attacker_every_k"] >= 1, "train.attacker_every_k must be >= 1")
    _require(train["optimizer"] == "adam", "only the adam optimizer is supported")
    unknown_flags = set(train["ablation_flags"]) - ABLATION_FLAGS
    _require(not unknown_flags, f"unknown ablation flags: {sorted(unknown_flags)}")
    _require(0.0 <= cfg["detector"]["lambda"] <= 1.0, "detector.lambda must lie in [0, 1]")
    _require(cfg["extractor"]["arch"] in ("projection", "compressed"),
             "extractor.arch must be projection|compressed")
    _require(cfg["embed"]["message_mode"] in ("random_sidecar", "key_derived"),
             "embed.message_mode must be random_sidecar|key_derived")
    entries = cfg["attacks"]["entries"]
    if entries is not None:
        _require(isinstance(entries, list) and entries, "attacks.entries must be a list")
        for i, entry in enumerate(entries):
            extra = set(entry) - _ATTACK_ENTRY_KEYS
            _require(not extra, f"attacks.entries[{i}] unknown keys: {sorted(extra)}")
            for needed in ("name", "kind", "min", "max"):
                _require(needed in entry, f"attacks.entries[{i}] missing {needed!r}")
            _require(entry["min"] < entry["max"],
                     f"attacks.entries[{i}]: need min < max")
            _require(entry["kind"] in ("benign", "malicious"),
                     f"attacks.entries[{i}]: kind must be benign|malicious")
    return cfg


def merge_config(overrides: dict | None) -> dict:
    cfg = default_config()
    if overrides:
        _reject_unknown(overrides, DEFAULTS)
        cfg = _merge(cfg, overrides)
    return validate_config(cfg)


def _line_of_key(text: str, key: str) -> int | None:
    token = key.split(".")[-1]
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.lstrip().startswith(f"{token}:"):
            return lineno
    return None


def load_config(path) -> dict:
    """Read a YAML config file, merge with defaults, validate."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    try:
        user = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark else str(path)
        raise ConfigurationError(f"invalid YAML at {where}: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    try:
        return merge_config(user)
    except ConfigurationError as exc:
        msg = str(exc)
        if msg.startswith("unknown config key: "):
            key = msg.removeprefix("unknown config key: ")
            line = _line_of_key(text, key)
            if line is not None:
                raise ConfigurationError(f"{path}:{line}: {msg}") from None
        raise ConfigurationError(f"{path}: {msg}") from None


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)


def echo_config(cfg: dict, out_dir) -> Path:
    """Write the fully-resolved config into an output directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / "effective_config.yaml"
    target.write_text(dump_config(cfg))
    return target
