"""Loss functions: analytic values, gradient behavior, and weighting."""
import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from advmask.errors import MalformedInputError, NotDifferentiableError
from advmask.losses import (
    LossWeights,
    gan_losses,
    identity_loss_impersonation,
    identity_loss_obfuscation,
    perturbation_loss,
    total_generator_loss,
)
from advmask.matcher import EmbeddingNet, MatcherHandle


class _ZeroLogitDisc(nn.Module):
    """Stand-in discriminator that outputs logit 0 everywhere: sigmoid == 0.5."""

    def forward(self, x):
        return torch.zeros(x.shape[0], 1, 2, 2)


def _handle(differentiable=True, dim=16):
    net = EmbeddingNet(dim=dim, width=0.25).eval()
    return MatcherHandle(net, name="t", resolution=32, dim=dim,
                         differentiable=differentiable)


# -- perturbation hinge ------------------------------------------------------

def test_perturbation_zero_mask_hits_floor():
    masks = torch.zeros(4, 3, 32, 32)
    val = perturbation_loss(masks, epsilon=3.0)
    assert val.item() == 3.0


def test_perturbation_above_floor_is_mean_norm():
    torch.manual_seed(0)
    masks = torch.randn(5, 3, 8, 8) * 2.0
    norms = masks.reshape(5, -1).norm(dim=1)
    assert (norms > 3.0).all()  # comfortably past the hinge
    val = perturbation_loss(masks, epsilon=3.0)
    assert abs(val.item() - norms.mean().item()) < 1e-5


def test_perturbation_mixed_batch():
    big = torch.full((1, 3, 8, 8), 1.0)        # norm ~13.86
    small = torch.full((1, 3, 8, 8), 0.001)    # norm ~0.014, below floor
    val = perturbation_loss(torch.cat([big, small]), epsilon=3.0)
    expected = (big.reshape(-1).norm().item() + 3.0) / 2
    assert abs(val.item() - expected) < 1e-5


def test_perturbation_gradient_dead_below_floor():
    masks = torch.full((2, 3, 8, 8), 1e-3, requires_grad=True)
    perturbation_loss(masks, epsilon=3.0).backward()
    assert torch.all(masks.grad == 0)


def test_perturbation_gradient_live_above_floor():
    masks = torch.full((2, 3, 8, 8), 0.5, requires_grad=True)
    perturbation_loss(masks, epsilon=3.0).backward()
    assert masks.grad.abs().max() > 0


def test_perturbation_rejects_bad_epsilon():
    with pytest.raises(MalformedInputError):
        perturbation_loss(torch.zeros(1, 3, 8, 8), epsilon=0.0)
    with pytest.raises(MalformedInputError):
        perturbation_loss(torch.zeros(1, 3, 8, 8), epsilon=-1.0)


# -- identity losses ---------------------------------------------------------

def test_obfuscation_self_similarity_is_one():
    torch.manual_seed(1)
    m = _handle()
    x = torch.rand(4, 3, 32, 32) * 2 - 1
    val = identity_loss_obfuscation(m, x, x)
    assert abs(val.item() - 1.0) < 1e-5


def test_obfuscation_reference_detached():
    """Gradient flows through the adversarial side only."""
    m = _handle()
    x = torch.rand(2, 3, 32, 32) * 2 - 1
    adv = (x * 0.9).clone().requires_grad_(True)
    val = identity_loss_obfuscation(m, x, adv)
    val.backward()
    assert adv.grad is not None and torch.isfinite(adv.grad).all()
    # probe side is embedded as a constant: backward never reaches it
    probe = x.clone().requires_grad_(True)
    val2 = identity_loss_obfuscation(m, probe, x * 0.9)
    val2.backward()
    assert probe.grad is None


def test_impersonation_range_and_self():
    torch.manual_seed(2)
    m = _handle()
    x = torch.rand(3, 3, 32, 32) * 2 - 1
    y = torch.rand(3, 3, 32, 32) * 2 - 1
    val = identity_loss_impersonation(m, x, y)
    assert 0.0 <= val.item() <= 2.0
    self_val = identity_loss_impersonation(m, x, x)
    assert abs(self_val.item()) < 1e-5


def test_identity_losses_require_differentiable_matcher():
    m = _handle(differentiable=False)
    x = torch.rand(2, 3, 32, 32) * 2 - 1
    with pytest.raises(NotDifferentiableError):
        identity_loss_obfuscation(m, x, x)
    with pytest.raises(NotDifferentiableError):
        identity_loss_impersonation(m, x, x)


def test_obfuscation_gradient_pushes_apart():
    """A sign step against the obfuscation loss lowers similarity.

    Start slightly off the probe: at adv == probe the cosine sits at its
    maximum and the gradient vanishes.
    """
    torch.manual_seed(3)
    m = _handle()
    x0 = torch.rand(2, 3, 32, 32) * 2 - 1
    adv = (x0 + 0.05 * torch.randn_like(x0)).clamp(-1, 1).requires_grad_(True)
    val = identity_loss_obfuscation(m, x0, adv)
    val.backward()
    adv1 = (adv - 0.1 * adv.grad.sign()).clamp(-1, 1).detach()
    after = identity_loss_obfuscation(m, x0, adv1)
    assert after.item() < val.item() - 1e-4


# -- GAN losses --------------------------------------------------------------

def test_gan_g_at_half_confidence():
    d = _ZeroLogitDisc()
    real = torch.rand(4, 3, 32, 32)
    fake = torch.rand(4, 3, 32, 32)
    gan_g, gan_d = gan_losses(d, real, fake)
    # D(fake) == 0.5 everywhere: saturating G loss is log(1 - 0.5).
    assert abs(gan_g.item() - math.log(0.5)) < 1e-6
    # D loss at chance: log 0.5 + log 0.5.
    assert abs(gan_d.item() - 2 * math.log(0.5)) < 1e-6


def test_gan_nonsaturating_at_half_confidence():
    d = _ZeroLogitDisc()
    x = torch.rand(2, 3, 32, 32)
    gan_g, _ = gan_losses(d, x, x, saturating=False)
    assert abs(gan_g.item() - (-math.log(0.5))) < 1e-6


def test_gan_d_separates_with_training_signal():
    """D loss gradient exists and is finite for a real discriminator."""
    from advmask.networks import PatchDiscriminator
    torch.manual_seed(4)
    d = PatchDiscriminator(width=0.25)
    real = torch.rand(2, 3, 32, 32) * 2 - 1
    fake = torch.rand(2, 3, 32, 32) * 2 - 1
    _, gan_d = gan_losses(d, real, fake)
    (-gan_d).backward()  # D ascends its objective
    grads = [p.grad for p in d.parameters() if p.grad is not None]
    assert grads and all(torch.isfinite(g).all() for g in grads)


def test_gan_g_graph_reaches_fake():
    """The generator objective must backprop into the fake images."""
    from advmask.networks import PatchDiscriminator
    torch.manual_seed(5)
    d = PatchDiscriminator(width=0.25)
    fake = (torch.rand(2, 3, 32, 32) * 2 - 1).requires_grad_(True)
    gan_g, _ = gan_losses(d, torch.rand(2, 3, 32, 32) * 2 - 1, fake)
    gan_g.backward()
    assert fake.grad is not None and fake.grad.abs().max() > 0


# -- weights and total -------------------------------------------------------

def test_weights_mode_defaults():
    w = LossWeights.for_mode("obfuscation")
    assert (w.lambda_identity, w.lambda_perturbation, w.epsilon) == (10.0, 1.0, 3.0)
    w2 = LossWeights.for_mode("impersonation")
    assert w2.epsilon == 8.0
    with pytest.raises(MalformedInputError):
        LossWeights.for_mode("nope")


def test_weights_validation():
    with pytest.raises(MalformedInputError):
        LossWeights(lambda_identity=-1.0)
    with pytest.raises(MalformedInputError):
        LossWeights(epsilon=0.0)


def test_total_is_weighted_sum():
    gan_g = torch.tensor(0.3)
    ident = torch.tensor(0.7)
    prt = torch.tensor(4.0)
    w = LossWeights(lambda_identity=10.0, lambda_perturbation=1.0, epsilon=3.0)
    total = total_generator_loss(gan_g, ident, prt, w)
    assert abs(total.item() - (0.3 + 10.0 * 0.7 + 1.0 * 4.0)) < 1e-6


def test_total_respects_custom_weights():
    gan_g = torch.tensor(1.0)
    ident = torch.tensor(1.0)
    prt = torch.tensor(1.0)
    w = LossWeights(lambda_identity=2.5, lambda_perturbation=0.5, epsilon=1.0)
    total = total_generator_loss(gan_g, ident, prt, w)
    assert abs(total.item() - 4.0) < 1e-6
