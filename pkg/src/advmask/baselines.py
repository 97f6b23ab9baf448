"""Gradient-sign baselines against an embedding matcher.

Both attacks carry an L-infinity budget on the normalized [-1, 1]
scale. The returned images satisfy the budget *exactly* under float32
arithmetic: the final perturbation is snapped to a 2^-16 grid, and
normalized pixels are exact multiples of 2^-8, so x0 + delta and the
round-trip (x_adv - x0) incur no rounding. The snap changes each
coordinate by at most 1.6e-5, which is noise relative to any useful
budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch

from .errors import MalformedInputError, NotDifferentiableError

_GRID = 65536.0  # 2^16


@dataclass
class AttackBudget:
    eps_inf: float = 0.16     # on the [-1, 1] scale; 0.16 ~ 8/255 pixels * 2
    steps: int = 40           # iterative refinement steps (ignored by fgsm)
    step_size: float | None = None  # default eps/10
    random_start: bool = True

    def __post_init__(self):
        if self.eps_inf <= 0:
            raise MalformedInputError(f"eps_inf must be positive, got {self.eps_inf}")
        if self.steps < 1:
            raise MalformedInputError(f"steps must be >= 1, got {self.steps}")
        if self.step_size is not None and self.step_size <= 0:
            raise MalformedInputError(f"step_size must be positive, got {self.step_size}")

    @classmethod
    def from_pixel_scale(cls, eps01: float, **kw) -> "AttackBudget":
        """Budget quoted on the [0, 1] pixel scale (doubled when normalized)."""
        return cls(eps_inf=2.0 * eps01, **kw)

    @property
    def effective_step(self) -> float:
        return self.step_size if self.step_size is not None else self.eps_inf / 10.0

    def to_dict(self) -> dict:
        return asdict(self)


def _check(matcher, probes: torch.Tensor, mode: str, targets: torch.Tensor | None,
           targets_required: bool) -> None:
    if not getattr(matcher, "differentiable", False):
        raise NotDifferentiableError("gradient attacks need a differentiable matcher")
    if mode not in ("obfuscation", "impersonation"):
        raise MalformedInputError(f"unknown mode {mode!r}")
    need_targets = targets_required or mode == "impersonation"
    if need_targets and targets is None:
        raise MalformedInputError(
            "this attack steers toward a target embedding in every mode; in "
            "obfuscation mode pass images of sampled non-self identities"
        )
    if targets is not None and targets.shape != probes.shape:
        raise MalformedInputError(
            f"targets {tuple(targets.shape)} must match probes {tuple(probes.shape)}"
        )


def _project(x0: torch.Tensor, delta: torch.Tensor, eps: float) -> torch.Tensor:
    """Snap delta to the exact grid, enforce budget and domain, compose."""
    eps_q = math.floor(eps * _GRID) / _GRID
    d = torch.clamp(delta, -eps_q, eps_q)
    d = torch.round(d * _GRID) / _GRID
    d = torch.clamp(d, min=-1.0 - x0, max=1.0 - x0)
    return x0 + d


def _objective_grad(matcher, x: torch.Tensor, ref: torch.Tensor, ascend_cos: bool):
    x = x.detach().requires_grad_(True)
    emb = matcher.embed(x)
    cos = (ref * emb).sum(dim=1)
    j = cos.sum() if ascend_cos else -cos.sum()
    (grad,) = torch.autograd.grad(j, x)
    return grad


def fgsm(
    matcher,
    probes: torch.Tensor,
    budget: AttackBudget,
    mode: str = "obfuscation",
    targets: torch.Tensor | None = None,
) -> torch.Tensor:
    """One signed-gradient step of size eps.

    Obfuscation ascends the negated self-similarity; impersonation
    ascends similarity to the target's embedding.
    """
    _check(matcher, probes, mode, targets, targets_required=False)
    x0 = probes.detach()
    with torch.no_grad():
        ref = matcher.embed(x0 if mode == "obfuscation" else targets)
    grad = _objective_grad(matcher, x0, ref, ascend_cos=(mode == "impersonation"))
    return _project(x0, budget.eps_inf * torch.sign(grad), budget.eps_inf)


def pgd(
    matcher,
    probes: torch.Tensor,
    budget: AttackBudget,
    mode: str = "obfuscation",
    targets: torch.Tensor | None = None,
    rng: np.random.Generator | None = None,
) -> torch.Tensor:
    """Iterated signed-gradient ascent projected into the budget ball.

    Both modes steer toward a target embedding; obfuscation uses images
    of sampled non-self identities as targets (evading by becoming
    someone else converges far better than undirected descent away from
    oneself). The iterate stays inside the L-inf ball and the [-1, 1]
    domain at every step.
    """
    _check(matcher, probes, mode, targets, targets_required=True)
    x0 = probes.detach()
    eps = budget.eps_inf
    alpha = budget.effective_step
    with torch.no_grad():
        ref = matcher.embed(targets)
    if budget.random_start:
        rng = rng or np.random.default_rng(0)
        start = rng.uniform(-eps, eps, size=tuple(x0.shape)).astype(np.float32)
        delta = torch.from_numpy(start)
    else:
        delta = torch.zeros_like(x0)
    delta = torch.clamp(delta, min=-1.0 - x0, max=1.0 - x0)
    for _ in range(budget.steps):
        x = torch.clamp(x0 + delta, -1.0, 1.0)
        grad = _objective_grad(matcher, x, ref, ascend_cos=True)
        delta = torch.clamp(delta + alpha * torch.sign(grad), -eps, eps)
        delta = torch.clamp(delta, min=-1.0 - x0, max=1.0 - x0)
    return _project(x0, delta, eps)
