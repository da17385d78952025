"""Adversarial training loop: embed, attack, extract, update both agents.

Each step samples fresh random messages, watermarks the batch, lets the
attacker compose per-image attacks, and updates the watermarking side
(direction generator, perturbation net, decoder, extractor) on the composite
loss while the attacker trains on its shaped reward. All randomness is
derived statelessly from (seed, epoch, step, image), so identical
configurations replay bit-for-bit and checkpoints resume exactly.

The watermarker's gradient flows through differentiable attack surrogates;
the attacker's reward uses the exact attack rendering, which is all a
score-function gradient needs. Benign and malicious exposure is balanced
per batch by `benign_malicious_ratio`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import attacks as attack_engine
from .attacker import (
    AttackAction,
    AttackerHyper,
    AttackerPolicy,
    FailureMemory,
    act,
    combine_rewards,
    memory_update,
    policy_loss,
    reward_curiosity,
    reward_failure,
    reward_proximity,
)
from .checkpoint import Checkpoint, save_checkpoint
from .embedder import (
    LossWeights,
    composite_loss,
    fuse_message_directions,
    hard_bit_error_rate,
)
from .metrics import psnr
from .pipeline import WatermarkSystem, build_system
from .utils import ValidationError, key_fingerprint, stable_seed


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    seed: int = 0
    benign_malicious_ratio: float = 0.5
    attacker_every_k: int = 1
    ablation_flags: set = field(default_factory=set)

    def __post_init__(self):
        self.ablation_flags = set(self.ablation_flags)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.optimizer != "adam":
            raise ValidationError("only adam is supported")


def _named_params(modules: dict) -> list:
    out = []
    for mod_name, module in modules.items():
        for pname, param in module.named_parameters():
            if param.requires_grad:
                out.append((f"{mod_name}.{pname}", param))
    return out


class Trainer:
    def __init__(self, system: WatermarkSystem, registry: attack_engine.AttackRegistry,
                 loss_weights: LossWeights, hyper: AttackerHyper, cfg: TrainConfig,
                 full_config: dict, memory_lambda: float | None = None):
        self.system = system
        self.registry = registry
        self.loss_weights = loss_weights
        self.hyper = hyper
        self.cfg = cfg
        self.full_config = full_config
        self.memory_lambda = (memory_lambda if memory_lambda is not None
                              else system.detector_lambda)
        self.flags = cfg.ablation_flags

        self.policy = AttackerPolicy(system.direction_gen.feature_dim, len(registry),
                                     seed=cfg.seed)
        self.memory = FailureMemory(hyper.memory_capacity)

        wm_modules = dict(system.named_modules_for_checkpoint())
        if "fixed_directions" in self.flags or system.naive_directions:
            for p in system.direction_gen.parameters():
                p.requires_grad_(False)
        self._wm_named = _named_params(wm_modules)
        self._at_named = _named_params({"policy": self.policy})
        self.wm_opt = torch.optim.Adam([p for _, p in self._wm_named],
                                       lr=cfg.learning_rate, foreach=True)
        self.at_opt = torch.optim.Adam([p for _, p in self._at_named],
                                       lr=cfg.learning_rate, foreach=True)

        self.epoch = 0
        self.history: list = []
        self.watermarker_updates = 0
        self.attacker_updates = 0
        self._global_step = 0
        self._pending_samples: list = []

        self._benign_idx = np.array(registry.indices("benign"), dtype=np.int64)
        self._malicious_idx = np.array(registry.indices("malicious"), dtype=np.int64)
        self._policy_driven = not (self.flags & {
            "no_attacker", "fixed_attack", "fixed_sequence", "random_combo",
            "single_ramp", "progressive", "fixed_curriculum"})

    # -- action selection (policy or scripted curricula) ----------------------

    def _scripted_action(self, epoch: int, seed: int) -> AttackAction:
        n = len(self.registry)
        selected = np.zeros(n, dtype=np.int64)
        strengths = np.full(n, 0.5)
        rng = np.random.default_rng(seed)
        flags = self.flags
        if "fixed_attack" in flags:
            selected[0] = 1
        elif "fixed_sequence" in flags:
            selected[:] = 1
        elif "random_combo" in flags:
            selected = rng.integers(0, 2, size=n)
            strengths = rng.uniform(0.0, 1.0, size=n)
        elif "single_ramp" in flags:
            selected[0] = 1
            ramp = epoch / max(self.cfg.epochs - 1, 1)
            strengths[:] = ramp
        elif "progressive" in flags:
            allowed = max(1, math.ceil((epoch + 1) / self.cfg.epochs * n))
            selected[:allowed] = rng.integers(0, 2, size=allowed)
            if selected.sum() == 0:
                selected[int(rng.integers(0, allowed))] = 1
            strengths = rng.uniform(0.0, 1.0, size=n)
        elif "fixed_curriculum" in flags:
            selected[epoch % n] = 1
            strengths[:] = 0.25 + 0.5 * (epoch / max(self.cfg.epochs - 1, 1))
        zero = torch.zeros(())
        return AttackAction(selected=selected, strengths=strengths,
                            probs=np.full(n, 0.5), log_prob=zero, entropy=zero)

    def _learnable_strength_action(self, feature: torch.Tensor, seed: int) -> AttackAction:
        """Single fixed attack whose strength the policy learns via a Gaussian
        score-function estimator."""
        _, strengths = self.policy(feature)
        tau = strengths[0]
        g = np.random.default_rng(seed)
        sigma = 0.1
        sample = float(np.clip(g.normal(float(tau.detach()), sigma), 0.0, 1.0))
        log_prob = -((sample - tau) ** 2) / (2 * sigma**2)
        n = len(self.registry)
        selected = np.zeros(n, dtype=np.int64)
        selected[0] = 1
        strengths_np = np.full(n, 0.5)
        strengths_np[0] = sample
        return AttackAction(selected=selected, strengths=strengths_np,
                            probs=np.full(n, 0.5), log_prob=log_prob,
                            entropy=torch.zeros(()))

    def _choose_action(self, feature: torch.Tensor, epoch: int, step: int,
                       image_idx: int) -> AttackAction:
        seed = stable_seed("action", self.cfg.seed, epoch, step, image_idx)
        if "single_learnable" in self.flags:
            return self._learnable_strength_action(feature, seed)
        if not self._policy_driven:
            return self._scripted_action(epoch, seed)
        return act(feature, self.policy, seed)

    # -- one optimization step ------------------------------------------------

    def train_step(self, images: torch.Tensor, epoch: int, step: int) -> dict:
        if images.ndim != 4 or images.shape[0] == 0:
            raise ValidationError("train_step expects a non-empty (B, 3, R, R) batch")
        b = images.shape[0]
        cfg = self.cfg
        no_attacker = "no_attacker" in self.flags

        msg_rng = np.random.default_rng(stable_seed("messages", cfg.seed, epoch, step))
        bits_np = msg_rng.integers(0, 2, size=(b, self.system.n_bits))
        bits = torch.from_numpy(bits_np).to(torch.float32)

        directions = self.system.directions(grad=True)
        f_orig = self.system.backbone.encode_image(images)
        fused = fuse_message_directions(bits, directions, self.system.targets)
        q = self.system.embedder.perturb(f_orig, fused)
        x_marked = self.system.embedder.render(images, q)
        f_marked = self.system.backbone.encode_image(x_marked)

        # attacker turn: exact rendering, shaped rewards, failure memory
        actions: list[AttackAction] = []
        reward_samples = []
        ber_attacked = []
        if not no_attacker:
            x_detached = x_marked.detach()
            for i in range(b):
                # policy forward stays outside no_grad: log_prob/entropy carry
                # the score-function graph
                action = self._choose_action(f_marked[i].detach(), epoch, step, i)
                actions.append(action)
                with torch.no_grad():
                    seed = stable_seed("attack-exact", cfg.seed, epoch, step, i)
                    x_att = attack_engine.apply(x_detached[i], action, self.registry,
                                                seed=seed)
                    f_att = self.system.backbone.encode_image(x_att)[0]
                    logits_att = self.system.extractor(f_att, directions)
                    fail = reward_failure(logits_att, bits[i])
                    cur = 0.0 if "no_curiosity" in self.flags else reward_curiosity(
                        f_marked[i].detach(), f_att, self.hyper.delta)
                    prox = 0.0 if "no_proximity" in self.flags else reward_proximity(
                        f_att, self.memory, self.hyper.nu, self.hyper.epsilon)
                    breakdown = combine_rewards(fail, cur, prox, action.n_active,
                                                self.hyper)
                    ber_i = float(hard_bit_error_rate(logits_att, bits[i]))
                    ber_attacked.append(ber_i)
                    memory_update(self.memory, f_att, ber_i, self.memory_lambda)
                reward_samples.append((action, breakdown))

        # watermarker turn: clean + surrogate-attacked branches
        logits_clean = self.system.extractor(f_marked, directions)
        benign_branches = [(logits_clean, bits)]
        malicious_branch = None
        ber_benign = []
        ber_malicious = []
        if not no_attacker:
            split_rng = np.random.default_rng(stable_seed("split", cfg.seed, epoch, step))
            perm = split_rng.permutation(b)
            n_mal = int(round(cfg.benign_malicious_ratio * b))
            mal_set = set(perm[:n_mal].tolist())
            benign_keep = self.registry.mask("benign")

            benign_rows, malicious_rows, mal_bits = [], [], []
            for i in range(b):
                seed = stable_seed("attack-branch", cfg.seed, epoch, step, i)
                if i in mal_set and len(self._malicious_idx):
                    action = self._forced_malicious(actions[i], epoch, step, i)
                    x_att = attack_engine.apply_surrogate(x_marked[i], action,
                                                          self.registry, seed=seed)
                    malicious_rows.append(x_att)
                    mal_bits.append(bits[i])
                else:
                    action = actions[i].masked(benign_keep)
                    x_att = attack_engine.apply_surrogate(x_marked[i], action,
                                                          self.registry, seed=seed)
                    benign_rows.append((x_att, bits[i]))

            if benign_rows:
                x_b = torch.stack([r for r, _ in benign_rows])
                bits_b = torch.stack([t for _, t in benign_rows])
                logits_b = self.system.extractor(
                    self.system.backbone.encode_image(x_b), directions)
                ber_benign = [float(hard_bit_error_rate(lg, tb))
                              for lg, tb in zip(logits_b, bits_b)]
                benign_branches.append((logits_b, bits_b))
            if malicious_rows:
                x_m = torch.stack(malicious_rows)
                bits_m = torch.stack(mal_bits)
                logits_m = self.system.extractor(
                    self.system.backbone.encode_image(x_m), directions)
                ber_malicious = [float(hard_bit_error_rate(lg, tb))
                                 for lg, tb in zip(logits_m, bits_m)]
                malicious_branch = (logits_m, bits_m)

        loss = composite_loss(f_orig.detach(), f_marked, benign_branches,
                              malicious_branch, self.loss_weights)
        self.wm_opt.zero_grad(set_to_none=True)
        loss.total.backward()
        self.wm_opt.step()
        self.watermarker_updates += 1
        self.system.refresh_directions()

        if reward_samples and self._has_policy_grad():
            self._pending_samples.extend(reward_samples)
        self._global_step += 1
        if self._pending_samples and self._global_step % cfg.attacker_every_k == 0:
            at_loss = policy_loss(self._pending_samples, self.hyper.r)
            self.at_opt.zero_grad(set_to_none=True)
            at_loss.backward()
            self.at_opt.step()
            self.attacker_updates += 1
            self._pending_samples = []

        ber_clean = [float(hard_bit_error_rate(lg, tb))
                     for lg, tb in zip(logits_clean, bits)]
        with torch.no_grad():
            step_psnr = float(np.mean([psnr(images[i], x_marked[i].detach())
                                       for i in range(b)]))
        metrics = {
            "loss_total": float(loss.total.detach()), "loss_clip": loss.clip,
            "loss_dir": loss.dir, "loss_ext": loss.ext,
            "ber_clean": float(np.mean(ber_clean)),
            "ber_benign": float(np.mean(ber_benign)) if ber_benign else float("nan"),
            "ber_malicious": float(np.mean(ber_malicious)) if ber_malicious else float("nan"),
            "ber_attacked": float(np.mean(ber_attacked)) if ber_attacked else float("nan"),
            "psnr": step_psnr,
            "reward_total": float(np.mean([rb.total for _, rb in reward_samples]))
            if reward_samples else float("nan"),
            "reward_failure": float(np.mean([rb.failure for _, rb in reward_samples]))
            if reward_samples else float("nan"),
            "memory_size": len(self.memory),
        }
        return metrics

    def _forced_malicious(self, action: AttackAction, epoch: int, step: int,
                          image_idx: int) -> AttackAction:
        """Malicious-branch action: the attacker's malicious picks, or one
        seeded malicious attack when it picked none."""
        keep = self.registry.mask("malicious")
        masked = action.masked(keep)
        if masked.selected.sum() > 0:
            return masked
        rng = np.random.default_rng(
            stable_seed("forced-mal", self.cfg.seed, epoch, step, image_idx))
        idx = int(rng.choice(self._malicious_idx))
        selected = np.zeros(len(self.registry), dtype=np.int64)
        selected[idx] = 1
        strengths = masked.strengths.copy()
        strengths[idx] = float(rng.uniform(0.0, 1.0))
        return AttackAction(selected=selected, strengths=strengths,
                            probs=masked.probs, log_prob=masked.log_prob,
                            entropy=masked.entropy)

    def _has_policy_grad(self) -> bool:
        return self._policy_driven or "single_learnable" in self.flags

    # -- epochs, checkpoints, resume ------------------------------------------

    def train(self, images: torch.Tensor, out_dir=None) -> dict:
        """Run the configured epochs; returns {'history', 'checkpoint'}."""
        if images.ndim != 4 or images.shape[0] == 0:
            raise ValidationError("training dataset must be a non-empty image stack")
        out_dir = Path(out_dir) if out_dir else None
        n = images.shape[0]
        final_path = None
        for epoch in range(self.epoch, self.cfg.epochs):
            order = np.random.default_rng(
                stable_seed("epoch-order", self.cfg.seed, epoch)).permutation(n)
            step_metrics = []
            for step, start in enumerate(range(0, n, self.cfg.batch_size)):
                batch = images[order[start:start + self.cfg.batch_size]]
                step_metrics.append(self.train_step(batch, epoch, step))
            self.history.append(self._aggregate(epoch, step_metrics))
            self.epoch = epoch + 1
            if out_dir is not None:
                final_path = self.save(out_dir / f"checkpoint_epoch{epoch:03d}.zip")
        if out_dir is not None:
            final_path = self.save(out_dir / "checkpoint_final.zip")
        return {"history": self.history, "checkpoint": final_path}

    @staticmethod
    def _aggregate(epoch: int, step_metrics: list) -> dict:
        keys = step_metrics[0].keys()
        agg = {"epoch": epoch}
        for key in keys:
            vals = [m[key] for m in step_metrics if not math.isnan(m[key])]
            agg[key] = float(np.mean(vals)) if vals else float("nan")
        return agg

    def save(self, path) -> Path:
        modules = dict(self.system.named_modules_for_checkpoint())
        modules["policy"] = self.policy
        if self.system.backbone.cfg.mode == "toy":
            modules["backbone"] = self.system.backbone
        return save_checkpoint(
            path, config=self.full_config, epoch=self.epoch, history=self.history,
            fingerprint=self.system.fingerprint, modules=modules,
            optimizers={
                "watermarker": (self.wm_opt, [n for n, _ in self._wm_named]),
                "attacker": (self.at_opt, [n for n, _ in self._at_named]),
            },
            memory=self.memory.as_tensor(),
        )


def build_trainer(cfg: dict, key: str) -> Trainer:
    """Assemble a Trainer from a resolved config mapping and a secret key."""
    system = build_system(cfg, key)
    registry = attack_engine.registry_from_config(cfg["attacks"])
    weights = LossWeights(**cfg["loss"])
    at = cfg["attacker"]
    hyper = AttackerHyper(delta=at["delta"], nu=at["nu"], epsilon=at["epsilon"],
                          o=at["o"], r=at["r"], memory_capacity=at["memory_capacity"],
                          action_penalty_sign=at["action_penalty_sign"])
    t = cfg["train"]
    tcfg = TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"],
                       learning_rate=t["learning_rate"], optimizer=t["optimizer"],
                       seed=t["seed"],
                       benign_malicious_ratio=t["benign_malicious_ratio"],
                       attacker_every_k=t["attacker_every_k"],
                       ablation_flags=set(t["ablation_flags"]))
    return Trainer(system, registry, weights, hyper, tcfg, full_config=cfg,
                   memory_lambda=at["memory_lambda"])


def resume_trainer(path, key: str) -> Trainer:
    """Rebuild a Trainer from a checkpoint; continues at the stored epoch."""
    ck = Checkpoint(path)
    if key_fingerprint(key) != ck.fingerprint:
        raise ValidationError("secret key does not match the checkpoint fingerprint")
    from .config import merge_config

    cfg = merge_config(ck.config)
    trainer = build_trainer(cfg, key)
    modules = dict(trainer.system.named_modules_for_checkpoint())
    modules["policy"] = trainer.policy
    if trainer.system.backbone.cfg.mode == "toy":
        modules["backbone"] = trainer.system.backbone
    ck.load_modules(modules)
    ck.load_optimizer("watermarker", trainer.wm_opt, [n for n, _ in trainer._wm_named])
    ck.load_optimizer("attacker", trainer.at_opt, [n for n, _ in trainer._at_named])
    trainer.memory.load(ck.load_memory())
    trainer.epoch = ck.epoch
    trainer.history = list(ck.history)
    trainer.system.refresh_directions()
    return trainer


def load_system(path, key: str):
    """Inference-only load: returns (system, config, history)."""
    ck = Checkpoint(path)
    if key_fingerprint(key) != ck.fingerprint:
        raise ValidationError("secret key does not match the checkpoint fingerprint")
    from .config import merge_config

    cfg = merge_config(ck.config)
    system = build_system(cfg, key)
    modules = dict(system.named_modules_for_checkpoint())
    if system.backbone.cfg.mode == "toy":
        modules["backbone"] = system.backbone
    ck.load_modules(modules)
    system.refresh_directions()
    return system, cfg, list(ck.history)
