"""Training objectives for the mask generator and its discriminator.

Sign conventions follow the usual saddle-point description: the
discriminator *maximizes* `gan_d`, the generator *minimizes* its total.
Callers that feed these to optimizers should negate `gan_d` for the
discriminator's descent step.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import torch

from .errors import MalformedInputError, NotDifferentiableError

LOG_FLOOR = 1e-8  # floor on log arguments; keeps saturated D finite


@dataclass
class LossWeights:
    lambda_identity: float = 10.0
    lambda_perturbation: float = 1.0
    epsilon: float = 3.0  # hinge floor on the mask L2 norm

    def __post_init__(self):
        if self.lambda_identity < 0 or self.lambda_perturbation < 0:
            raise MalformedInputError("loss weights must be non-negative")
        if self.epsilon <= 0:
            raise MalformedInputError(f"epsilon must be positive, got {self.epsilon}")

    @classmethod
    def for_mode(cls, mode: str) -> "LossWeights":
        if mode == "obfuscation":
            return cls(epsilon=3.0)
        if mode == "impersonation":
            return cls(epsilon=8.0)
        raise MalformedInputError(f"unknown mode {mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    gan_g: float
    gan_d: float
    identity: float
    perturbation: float
    total_g: float

    def to_dict(self) -> dict:
        return asdict(self)


def perturbation_loss(masks: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Hinge on the per-image mask L2 norm: mean(max(eps, ||mask||_2)).

    Below the hinge the loss is flat, so small masks draw no gradient;
    above it the norm itself is penalized.
    """
    if masks.ndim != 4 or masks.shape[0] == 0:
        raise MalformedInputError(f"expected non-empty NCHW masks, got {tuple(masks.shape)}")
    if epsilon <= 0:
        raise MalformedInputError(f"epsilon must be positive, got {epsilon}")
    norms = torch.linalg.vector_norm(masks.flatten(1), dim=1)
    floor = torch.as_tensor(epsilon, dtype=norms.dtype)
    return torch.maximum(norms, floor).mean()


def identity_loss_obfuscation(matcher, probes: torch.Tensor, adv: torch.Tensor) -> torch.Tensor:
    """Mean cosine between each probe and its adversarial image.

    Minimizing pushes the adversarial embedding away from the source
    identity. Reference embeddings are treated as constants.
    """
    _require_differentiable(matcher)
    with torch.no_grad():
        ref = matcher.embed(probes)
    emb = matcher.embed(adv)
    return (ref * emb).sum(dim=1).mean()


def identity_loss_impersonation(matcher, targets: torch.Tensor, adv: torch.Tensor) -> torch.Tensor:
    """Mean (1 - cosine) between target images and adversarial images.

    Zero when every adversarial embedding lands exactly on its target.
    """
    _require_differentiable(matcher)
    with torch.no_grad():
        ref = matcher.embed(targets)
    emb = matcher.embed(adv)
    return (1.0 - (ref * emb).sum(dim=1)).mean()


def _require_differentiable(matcher) -> None:
    if not getattr(matcher, "differentiable", False):
        raise NotDifferentiableError(
            f"matcher {getattr(matcher, 'name', '?')!r} exposes scores only; "
            "loss gradients need a differentiable matcher"
        )


def gan_losses(
    disc, real: torch.Tensor, fake: torch.Tensor, saturating: bool = True
) -> tuple[torch.Tensor, torch.Tensor]:
    """Patch-level adversarial objectives; returns (gan_g, gan_d).

    gan_d = E[log D(x)] + E[log(1 - D(x_adv))], which the discriminator
    ascends. The generator descends E[log(1 - D(x_adv))] by default; the
    non-saturating variant descends -E[log D(x_adv)] instead. Log
    arguments are floored at 1e-8 so a saturated discriminator cannot
    produce infinities (note 1 - 1e-8 rounds to 1.0 in float32, which is
    why the floor sits on the log argument rather than the probability).
    """
    p_real = torch.sigmoid(disc(real))
    p_fake = torch.sigmoid(disc(fake))
    log_real = torch.log(torch.clamp(p_real, min=LOG_FLOOR))
    log_one_minus_fake = torch.log(torch.clamp(1.0 - p_fake, min=LOG_FLOOR))
    gan_d = log_real.mean() + log_one_minus_fake.mean()
    if saturating:
        gan_g = log_one_minus_fake.mean()
    else:
        gan_g = -torch.log(torch.clamp(p_fake, min=LOG_FLOOR)).mean()
    return gan_g, gan_d


def total_generator_loss(
    gan_g: torch.Tensor | float,
    identity: torch.Tensor | float,
    perturbation: torch.Tensor | float,
    weights: LossWeights,
) -> torch.Tensor:
    total = (
        gan_g
        + weights.lambda_identity * identity
        + weights.lambda_perturbation * perturbation
    )
    return torch.as_tensor(total) if not torch.is_tensor(total) else total
