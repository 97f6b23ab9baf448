"""Adversarial-mask generator training.

One trainer step runs the discriminator update(s) on a detached batch,
then a single generator update on the combined objective (adversarial
realism + identity deflection/attraction + mask-norm hinge). Metrics
stream to a JSONL file; checkpoints capture networks, optimizers, and
both RNG streams so a resumed run continues the exact trajectory.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from filelock import FileLock, Timeout

from .data import FaceDataset, config_hash, to_tensor
from .errors import (
    CheckpointMismatchError,
    MalformedInputError,
    ProtocolInfeasibleError,
    TrainingFailedError,
)
from .losses import (
    LossBreakdown,
    LossWeights,
    gan_losses,
    identity_loss_impersonation,
    identity_loss_obfuscation,
    perturbation_loss,
)
from .networks import MaskGenerator, PatchDiscriminator, compose, load_module, save_module

MODES = ("obfuscation", "impersonation")


@dataclass
class TrainingConfig:
    mode: str = "obfuscation"
    steps: int = 5000
    batch_size: int = 32
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    width: float = 1.0
    n_res_blocks: int = 3
    conditioning: str = "concat"   # impersonation only: "concat" | "probe_only"
    head_filters: int = 3
    d_steps_per_g: int = 1
    saturating_gan: bool = True
    use_gan: bool = True
    zero_init_mask: bool = False
    checkpoint_every: int = 1000
    log_every: int = 10
    patience_windows: int | None = None  # None disables early stopping
    window_size: int = 200
    min_delta: float = 1e-4
    deterministic: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise MalformedInputError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.conditioning not in ("concat", "probe_only"):
            raise MalformedInputError(f"unknown conditioning {self.conditioning!r}")
        if self.steps < 1 or self.batch_size < 1 or self.d_steps_per_g < 1:
            raise MalformedInputError("steps, batch_size, d_steps_per_g must be >= 1")
        if self.lr <= 0 or not (0 <= self.beta1 < 1) or not (0 <= self.beta2 < 1):
            raise MalformedInputError("bad optimizer hyperparameters")

    @property
    def g_in_channels(self) -> int:
        if self.mode == "impersonation" and self.conditioning == "concat":
            return 6
        return 3

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


def sample_targets(
    subject_labels: np.ndarray,
    rng: np.random.Generator,
    indices: np.ndarray | None = None,
) -> np.ndarray:
    """For each sample, pick a uniformly random index of a different subject.

    `subject_labels` maps every corpus index to an integer identity; the
    result indexes back into the same corpus. With `indices`, targets are
    drawn for that batch only (still from the whole corpus).
    """
    labels = np.asarray(subject_labels)
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise ProtocolInfeasibleError("target sampling needs at least 2 identities")
    batch_labels = labels if indices is None else labels[np.asarray(indices)]
    others = {s: np.nonzero(labels != s)[0] for s in uniq}
    out = np.empty(batch_labels.size, dtype=np.int64)
    for i, s in enumerate(batch_labels):
        pool = others[s]
        out[i] = pool[rng.integers(pool.size)]
    return out


class Trainer:
    """Bundles the networks, optimizers, data tensors, and run directory."""

    def __init__(
        self,
        config: TrainingConfig,
        dataset: FaceDataset,
        matcher,
        run_dir: str,
    ):
        if not matcher.differentiable:
            raise MalformedInputError("training needs a differentiable matcher")
        if matcher.resolution != dataset.resolution:
            raise MalformedInputError(
                f"matcher resolution {matcher.resolution} != dataset {dataset.resolution}"
            )
        if config.mode == "impersonation" and len(dataset.subjects) < 2:
            raise ProtocolInfeasibleError("impersonation needs at least 2 identities")
        self.config = config
        self.dataset = dataset
        self.matcher = matcher
        self.run_dir = run_dir
        os.makedirs(run_dir, exist_ok=True)

        if config.deterministic:
            torch.use_deterministic_algorithms(True)
        torch.manual_seed(config.seed)
        self.rng = np.random.default_rng(config.seed)

        self.G = MaskGenerator(
            in_channels=config.g_in_channels,
            width=config.width,
            n_res_blocks=config.n_res_blocks,
        )
        if config.zero_init_mask:
            self.G.zero_output_layer()
        self.D = PatchDiscriminator(width=config.width, head_filters=config.head_filters)
        betas = (config.beta1, config.beta2)
        self.opt_g = torch.optim.Adam(self.G.parameters(), lr=config.lr, betas=betas)
        self.opt_d = torch.optim.Adam(self.D.parameters(), lr=config.lr, betas=betas)
        self.step = 0

        imgs = np.stack([dataset.image(i) for i in range(len(dataset))])
        self.images = to_tensor(imgs)
        label_of = {s: k for k, s in enumerate(dataset.subjects)}
        self.labels = np.array([label_of[r.subject_id] for r in dataset.records])
        self._metrics_path = os.path.join(run_dir, "metrics.jsonl")

    # ------------------------------------------------------------------ step

    def train_step(self, indices: np.ndarray) -> LossBreakdown:
        cfg, w = self.config, self.config.weights
        self.G.train()
        self.D.train()
        x = self.images[indices]
        if cfg.mode == "impersonation":
            t_idx = sample_targets(self.labels, self.rng, indices)
            y = self.images[t_idx]
            g_in = torch.cat([x, y], dim=1) if cfg.conditioning == "concat" else x
        else:
            y = None
            g_in = x
        mask = self.G(g_in)
        adv = compose(x, mask)

        gan_d_val = 0.0
        if cfg.use_gan:
            adv_detached = adv.detach()
            for _ in range(cfg.d_steps_per_g):
                _, gan_d = gan_losses(self.D, x, adv_detached)
                self.opt_d.zero_grad()
                (-gan_d).backward()
                self.opt_d.step()
            gan_d_val = float(gan_d.detach())

        if cfg.use_gan:
            gan_g, _ = gan_losses(self.D, x, adv, saturating=cfg.saturating_gan)
        else:
            gan_g = torch.zeros(())
        if w.lambda_identity != 0:
            if cfg.mode == "impersonation":
                ident = identity_loss_impersonation(self.matcher, y, adv)
            else:
                ident = identity_loss_obfuscation(self.matcher, x, adv)
            ident_val = float(ident.detach())
        else:
            with torch.no_grad():
                if cfg.mode == "impersonation":
                    ident_val = float(identity_loss_impersonation(self.matcher, y, adv))
                else:
                    ident_val = float(identity_loss_obfuscation(self.matcher, x, adv))
            ident = 0.0
        prt = perturbation_loss(mask, w.epsilon)
        total = gan_g + w.lambda_identity * ident + w.lambda_perturbation * prt
        self.opt_g.zero_grad()
        total.backward()
        self.opt_g.step()

        out = LossBreakdown(
            gan_g=float(gan_g.detach()) if hasattr(gan_g, "detach") else float(gan_g),
            gan_d=gan_d_val,
            identity=ident_val,
            perturbation=float(prt.detach()),
            total_g=float(total.detach()),
        )
        if not all(map(math.isfinite, out.to_dict().values())):
            scene = os.path.join(self.run_dir, "crime_scene.pt")
            torch.save(
                {
                    "step": self.step,
                    "indices": np.asarray(indices),
                    "losses": out.to_dict(),
                    "G": self.G.state_dict(),
                    "D": self.D.state_dict(),
                },
                scene,
            )
            raise TrainingFailedError(
                f"non-finite loss at step {self.step}: {out.to_dict()} "
                f"(state dumped to {scene})"
            )
        return out

    # ------------------------------------------------------------------ loop

    def train(self) -> dict:
        lock = FileLock(os.path.join(self.run_dir, ".lock"))
        try:
            lock.acquire(timeout=0.1)
        except Timeout:
            raise TrainingFailedError(
                f"another trainer holds {self.run_dir}; refusing to share a run dir"
            )
        try:
            return self._train_locked()
        finally:
            lock.release()

    def _train_locked(self) -> dict:
        cfg = self.config
        manifest_path = os.path.join(self.run_dir, "manifest.json")
        if self.step >= cfg.steps and os.path.exists(manifest_path):
            # resumed at or past the configured end; the finished record stands
            with open(manifest_path) as f:
                return json.load(f)
        with open(os.path.join(self.run_dir, "config.json"), "w") as f:
            json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        started = time.time()
        mode = "a" if self.step > 0 else "w"
        n = len(self.dataset)
        window_vals: list[float] = []
        best_window = math.inf
        stalls = 0
        first_window = None
        last_window = None
        last = None
        with open(self._metrics_path, mode) as metrics_f:
            while self.step < cfg.steps:
                indices = self.rng.integers(0, n, size=cfg.batch_size)
                last = self.train_step(indices)
                self.step += 1
                if self.step % cfg.log_every == 0 or self.step == cfg.steps:
                    line = {"step": self.step, "seconds": time.time() - started}
                    line.update(last.to_dict())
                    metrics_f.write(json.dumps(line) + "\n")
                    metrics_f.flush()
                window_vals.append(last.identity)
                if len(window_vals) >= cfg.window_size:
                    mean_id = float(np.mean(window_vals))
                    window_vals.clear()
                    if first_window is None:
                        first_window = mean_id
                    last_window = mean_id
                    if mean_id < best_window - cfg.min_delta:
                        best_window = mean_id
                        stalls = 0
                    else:
                        stalls += 1
                    if cfg.patience_windows and stalls >= cfg.patience_windows:
                        break
                if self.step % cfg.checkpoint_every == 0 or self.step == cfg.steps:
                    self.save_checkpoint()
        if self.step % cfg.checkpoint_every and self.step != cfg.steps:
            self.save_checkpoint()  # early stop between cadence points
        manifest = {
            "config": cfg.to_dict(),
            "config_hash": config_hash(cfg.to_dict()),
            "mode": cfg.mode,
            "seed": cfg.seed,
            "steps_run": self.step,
            "wall_seconds": time.time() - started,
            "metrics_file": os.path.basename(self._metrics_path),
            "checkpoints": self.checkpoint_steps(),
            "final_losses": last.to_dict() if last else None,
            "identity_first_window": first_window,
            "identity_last_window": last_window,
            "dataset": {
                "root": self.dataset.root,
                "images": len(self.dataset),
                "subjects": len(self.dataset.subjects),
                "resolution": self.dataset.resolution,
            },
            "matcher": {
                "name": self.matcher.name,
                "dim": self.matcher.dim,
                "resolution": self.matcher.resolution,
            },
        }
        with open(os.path.join(self.run_dir, "manifest.json"), "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
        return manifest

    # ---------------------------------------------------------- checkpoints

    def _ckpt_dir(self, step: int) -> str:
        return os.path.join(self.run_dir, "checkpoints", f"{step:06d}")

    def checkpoint_steps(self) -> list[int]:
        root = os.path.join(self.run_dir, "checkpoints")
        if not os.path.isdir(root):
            return []
        steps = []
        for name in sorted(os.listdir(root)):
            if name.isdigit() and os.path.exists(os.path.join(root, name, "opt.ckpt")):
                steps.append(int(name))
        return steps

    def save_checkpoint(self) -> str:
        d = self._ckpt_dir(self.step)
        os.makedirs(d, exist_ok=True)
        chash = config_hash(self.config.to_dict())
        extra = {"step": self.step, "config_hash": chash}
        save_module(self.G, os.path.join(d, "G.ckpt"), extra)
        save_module(self.D, os.path.join(d, "D.ckpt"), extra)
        torch.save(
            {
                "step": self.step,
                "config_hash": chash,
                "opt_g": self.opt_g.state_dict(),
                "opt_d": self.opt_d.state_dict(),
                "torch_rng": torch.get_rng_state(),
                "numpy_rng": self.rng.bit_generator.state,
            },
            os.path.join(d, "opt.ckpt"),
        )
        return d

    def load_checkpoint(self, step: int | None = None) -> int:
        steps = self.checkpoint_steps()
        if not steps:
            raise CheckpointMismatchError(f"no checkpoints under {self.run_dir}")
        step = steps[-1] if step is None else step
        if step not in steps:
            raise CheckpointMismatchError(f"no checkpoint at step {step}, have {steps}")
        d = self._ckpt_dir(step)
        g, _ = load_module(os.path.join(d, "G.ckpt"))
        dsc, _ = load_module(os.path.join(d, "D.ckpt"))
        opt = torch.load(os.path.join(d, "opt.ckpt"), map_location="cpu", weights_only=False)
        chash = config_hash(self.config.to_dict())
        if opt["config_hash"] != chash:
            raise CheckpointMismatchError(
                f"checkpoint at {d} was written under config {opt['config_hash']}, "
                f"current config is {chash}"
            )
        self.G = g
        self.D = dsc
        betas = (self.config.beta1, self.config.beta2)
        self.opt_g = torch.optim.Adam(self.G.parameters(), lr=self.config.lr, betas=betas)
        self.opt_d = torch.optim.Adam(self.D.parameters(), lr=self.config.lr, betas=betas)
        self.opt_g.load_state_dict(opt["opt_g"])
        self.opt_d.load_state_dict(opt["opt_d"])
        torch.set_rng_state(opt["torch_rng"])
        self.rng.bit_generator.state = opt["numpy_rng"]
        self.step = opt["step"]
        return self.step

    @classmethod
    def resume(cls, run_dir: str, dataset: FaceDataset, matcher, step: int | None = None) -> "Trainer":
        cfg_path = os.path.join(run_dir, "config.json")
        if not os.path.exists(cfg_path):
            raise CheckpointMismatchError(f"{run_dir} has no config.json to resume from")
        with open(cfg_path) as f:
            config = TrainingConfig.from_dict(json.load(f))
        t = cls(config, dataset, matcher, run_dir)
        t.load_checkpoint(step)
        return t


def train_generator(
    config: TrainingConfig, dataset: FaceDataset, matcher, run_dir: str
) -> tuple[MaskGenerator, PatchDiscriminator, dict]:
    t = Trainer(config, dataset, matcher, run_dir)
    manifest = t.train()
    return t.G, t.D, manifest


def load_latest_generator(run_dir: str, step: int | None = None) -> tuple[MaskGenerator, dict]:
    """Load the generator from a run's newest (or given) checkpoint."""
    root = os.path.join(run_dir, "checkpoints")
    steps = []
    if os.path.isdir(root):
        for name in sorted(os.listdir(root)):
            if name.isdigit() and os.path.exists(os.path.join(root, name, "G.ckpt")):
                steps.append(int(name))
    if not steps:
        raise CheckpointMismatchError(f"no generator checkpoints under {run_dir}")
    step = steps[-1] if step is None else step
    if step not in steps:
        raise CheckpointMismatchError(f"no checkpoint at step {step}, have {steps}")
    module, extra = load_module(os.path.join(root, f"{step:06d}", "G.ckpt"))
    if not isinstance(module, MaskGenerator):
        raise CheckpointMismatchError(f"checkpoint at step {step} is not a generator")
    return module, extra
