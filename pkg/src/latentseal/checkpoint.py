"""Versioned checkpoint archive.

A checkpoint is a zip file with fixed member timestamps so identical runs
produce byte-identical archives:

  manifest.json         version, config, epoch, key fingerprint, metric
                        history, tensor index (name -> shape/dtype),
                        optimizer step counters
  tensors/<name>.npy    module parameters and buffers
  opt/<o>/<p>/<s>.npy   Adam first/second moments per parameter
  memory.npy            failure-memory entries (optional)

The raw secret key is never written; only its fingerprint.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .utils import ValidationError

FORMAT_VERSION = 1
_EPOCH_DATE = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, array, allow_pickle=False)
    return buf.getvalue()


def _module_tensors(modules: dict) -> dict:
    out = {}
    for mod_name, module in modules.items():
        for pname, tensor in module.state_dict().items():
            out[f"{mod_name}.{pname}"] = tensor.detach().cpu().numpy()
    return out


def save_checkpoint(path, *, config: dict, epoch: int, history: list,
                    fingerprint: str, modules: dict,
                    optimizers: dict | None = None,
                    memory: torch.Tensor | None = None) -> Path:
    """Write the archive; `optimizers` maps name -> (optimizer, param_names)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = _module_tensors(modules)
    members: dict[str, bytes] = {}
    for name, arr in tensors.items():
        members[f"tensors/{name}.npy"] = _npy_bytes(arr)

    opt_steps: dict = {}
    if optimizers:
        for oname, (opt, param_names) in optimizers.items():
            params = [p for g in opt.param_groups for p in g["params"]]
            if len(params) != len(param_names):
                raise ValidationError("optimizer param count does not match names")
            steps = {}
            for pname, param in zip(param_names, params):
                state = opt.state.get(param)
                if not state:
                    continue
                steps[pname] = float(state["step"])
                for slot in ("exp_avg", "exp_avg_sq"):
                    members[f"opt/{oname}/{pname}/{slot}.npy"] = _npy_bytes(
                        state[slot].detach().cpu().numpy())
            opt_steps[oname] = steps

    if memory is not None and memory.numel():
        members["memory.npy"] = _npy_bytes(memory.detach().cpu().numpy())

    manifest = {
        "format_version": FORMAT_VERSION,
        "epoch": epoch,
        "key_fingerprint": fingerprint,
        "config": config,
        "history": history,
        "tensors": {name: {"shape": list(arr.shape), "dtype": str(arr.dtype)}
                    for name, arr in tensors.items()},
        "optimizer_steps": opt_steps,
    }
    members["manifest.json"] = json.dumps(manifest, sort_keys=True).encode("utf-8")

    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(members):
            info = zipfile.ZipInfo(name, date_time=_EPOCH_DATE)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, members[name])
    return path


class Checkpoint:
    """Loaded archive: manifest plus lazily decoded arrays."""

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists():
            raise ValidationError(f"checkpoint not found: {self.path}")
        with zipfile.ZipFile(self.path) as zf:
            self._members = {name: zf.read(name) for name in zf.namelist()}
        if "manifest.json" not in self._members:
            raise ValidationError(f"{self.path} is not a checkpoint archive (no manifest)")
        self.manifest = json.loads(self._members["manifest.json"])
        if self.manifest.get("format_version") != FORMAT_VERSION:
            raise ValidationError(
                f"unsupported checkpoint format {self.manifest.get('format_version')}")

    @property
    def config(self) -> dict:
        return self.manifest["config"]

    @property
    def epoch(self) -> int:
        return self.manifest["epoch"]

    @property
    def history(self) -> list:
        return self.manifest["history"]

    @property
    def fingerprint(self) -> str:
        return self.manifest["key_fingerprint"]

    def array(self, member: str) -> np.ndarray:
        return np.load(io.BytesIO(self._members[member]), allow_pickle=False)

    def tensor_names(self) -> list:
        return sorted(self.manifest["tensors"])

    def load_modules(self, modules: dict) -> None:
        for mod_name, module in modules.items():
            state = {}
            for pname in module.state_dict():
                member = f"tensors/{mod_name}.{pname}.npy"
                if member not in self._members:
                    raise ValidationError(f"checkpoint missing tensor {member}")
                state[pname] = torch.from_numpy(self.array(member))
            module.load_state_dict(state)

    def load_optimizer(self, oname: str, opt, param_names: list) -> None:
        steps = self.manifest["optimizer_steps"].get(oname, {})
        params = [p for g in opt.param_groups for p in g["params"]]
        for pname, param in zip(param_names, params):
            if pname not in steps:
                continue
            state = {"step": torch.tensor(steps[pname])}
            for slot in ("exp_avg", "exp_avg_sq"):
                member = f"opt/{oname}/{pname}/{slot}.npy"
                state[slot] = torch.from_numpy(self.array(member))
            opt.state[param] = state

    def load_memory(self) -> torch.Tensor | None:
        if "memory.npy" not in self._members:
            return None
        return torch.from_numpy(self.array("memory.npy"))
