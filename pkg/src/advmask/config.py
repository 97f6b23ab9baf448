"""Experiment configuration: a strict YAML schema over nested dataclasses.

Unknown keys are rejected with their full dotted path instead of being
silently ignored, which catches typos like ``lambda_identiy`` before a
two-hour run burns on defaults.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field, asdict

import torch
import yaml

from .baselines import AttackBudget
from .data import config_hash
from .errors import MalformedInputError
from .losses import LossWeights
from .trainer import TrainingConfig

DEVICE_ENV = "ADVMASK_DEVICE"


@dataclass
class DataSection:
    root: str = "data/toyfaces"
    resolution: int = 64
    calibration_fraction: float = 0.5
    n_folds: int = 10
    n_subjects: int = 20          # used when synthesizing the corpus
    images_per_subject: int = 6


@dataclass
class MatcherSection:
    dim: int = 64
    width: float = 1.0
    steps: int = 1500
    batch_size: int = 32
    lr: float = 1e-3
    scale: float = 16.0
    min_auc: float = 0.6
    checkpoint: str = "matcher.ckpt"  # relative to output_dir


@dataclass
class TrainSection:
    mode: str = "obfuscation"
    steps: int = 5000
    batch_size: int = 8
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    lambda_identity: float = 10.0
    lambda_perturbation: float = 1.0
    epsilon: float | None = None   # None picks the mode default (3 / 8)
    width: float = 0.25
    n_res_blocks: int = 3
    conditioning: str = "concat"
    head_filters: int = 3
    d_steps_per_g: int = 1
    saturating_gan: bool = True
    use_gan: bool = True
    zero_init_mask: bool = False
    checkpoint_every: int = 1000
    log_every: int = 10
    patience_windows: int | None = None
    window_size: int = 200


@dataclass
class AttackSection:
    method: str = "maskgan"
    eps_pixel: float = 0.08        # L-inf budget on the [0, 1] pixel scale
    pgd_steps: int = 40
    pgd_step_size: float | None = None
    random_start: bool = True


@dataclass
class EvalSection:
    far: float = 0.01
    ssim_window: str = "gaussian"
    ssim_size: int = 11
    ssim_sigma: float = 1.5
    hist_bins: int = 40


@dataclass
class SweepSection:
    eps_values: list[float] = field(default_factory=lambda: [1.0, 3.0, 5.0, 8.0])
    steps: int | None = None       # None reuses train.steps


@dataclass
class AblateSection:
    variants: list[str] = field(
        default_factory=lambda: ["full", "no_identity", "no_perturbation", "no_gan"]
    )
    steps: int | None = None


@dataclass
class VisualizeSection:
    n_examples: int = 4
    threshold: float = 0.40


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    deterministic: bool = False
    data: DataSection = field(default_factory=DataSection)
    matcher: MatcherSection = field(default_factory=MatcherSection)
    train: TrainSection = field(default_factory=TrainSection)
    attack: AttackSection = field(default_factory=AttackSection)
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    ablate: AblateSection = field(default_factory=AblateSection)
    visualize: VisualizeSection = field(default_factory=VisualizeSection)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    def training_config(self, **overrides) -> TrainingConfig:
        t = self.train
        eps = t.epsilon
        if eps is None:
            eps = LossWeights.for_mode(t.mode).epsilon
        kw = dict(
            mode=t.mode,
            steps=t.steps,
            batch_size=t.batch_size,
            lr=t.lr,
            beta1=t.beta1,
            beta2=t.beta2,
            weights=LossWeights(
                lambda_identity=t.lambda_identity,
                lambda_perturbation=t.lambda_perturbation,
                epsilon=eps,
            ),
            seed=self.seed,
            width=t.width,
            n_res_blocks=t.n_res_blocks,
            conditioning=t.conditioning,
            head_filters=t.head_filters,
            d_steps_per_g=t.d_steps_per_g,
            saturating_gan=t.saturating_gan,
            use_gan=t.use_gan,
            zero_init_mask=t.zero_init_mask,
            checkpoint_every=t.checkpoint_every,
            log_every=t.log_every,
            patience_windows=t.patience_windows,
            window_size=t.window_size,
            deterministic=self.deterministic,
        )
        kw.update(overrides)
        return TrainingConfig(**kw)

    def attack_budget(self) -> AttackBudget:
        a = self.attack
        return AttackBudget(
            eps_inf=2.0 * a.eps_pixel,
            steps=a.pgd_steps,
            step_size=a.pgd_step_size,
            random_start=a.random_start,
        )

    def ssim_kw(self) -> dict:
        e = self.eval
        return {
            "window": e.ssim_window,
            "window_size": e.ssim_size,
            "sigma": e.ssim_sigma,
        }


_NoneType = type(None)


def _coerce(value, ftype, path: str):
    origin = getattr(ftype, "__origin__", None)
    args = getattr(ftype, "__args__", ())
    if origin is None and isinstance(ftype, type) and dataclasses.is_dataclass(ftype):
        if value is None:
            value = {}
        if not isinstance(value, dict):
            raise MalformedInputError(f"{path}: expected a mapping, got {value!r}")
        return _build(ftype, value, path)
    # Optional[X] and list[X]
    if args and _NoneType in args:
        if value is None:
            return None
        inner = [a for a in args if a is not _NoneType][0]
        return _coerce(value, inner, path)
    if origin is list:
        if not isinstance(value, list):
            raise MalformedInputError(f"{path}: expected a list, got {value!r}")
        return [_coerce(v, args[0] if args else str, f"{path}[{k}]")
                for k, v in enumerate(value)]
    if ftype is bool:
        if not isinstance(value, bool):
            raise MalformedInputError(f"{path}: expected true/false, got {value!r}")
        return value
    if ftype is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise MalformedInputError(f"{path}: expected an integer, got {value!r}")
        return value
    if ftype is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise MalformedInputError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if ftype is str:
        if not isinstance(value, str):
            raise MalformedInputError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, data: dict, prefix: str = ""):
    # annotations are strings under `from __future__ import annotations`
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls)]
    unknown = set(data) - set(names)
    if unknown:
        key = sorted(unknown)[0]
        where = f"{prefix}.{key}" if prefix else key
        raise MalformedInputError(f"unknown config key: {where}")
    kwargs = {}
    for name in names:
        path = f"{prefix}.{name}" if prefix else name
        ftype = hints[name]
        if name in data:
            kwargs[name] = _coerce(data[name], ftype, path)
        elif dataclasses.is_dataclass(ftype):
            kwargs[name] = _build(ftype, {}, path)
    return cls(**kwargs)


def load_config(path: str) -> ExperimentConfig:
    with open(path) as f:
        raw = yaml.safe_load(f)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise MalformedInputError(f"{path}: top level must be a mapping")
    return _build(ExperimentConfig, raw)


def write_default_config(path: str) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(ExperimentConfig().to_dict(), f, sort_keys=False)


def resolve_device() -> torch.device:
    """Compute device from the environment; everything defaults to cpu."""
    name = os.environ.get(DEVICE_ENV, "cpu")
    try:
        return torch.device(name)
    except RuntimeError as e:
        raise MalformedInputError(f"bad {DEVICE_ENV} value {name!r}: {e}") from e
