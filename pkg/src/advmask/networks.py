"""Generator and discriminator networks plus the mask composition op.

The generator is an image-to-image network (7x7 ingress conv, two
stride-2 downsampling convs, a residual trunk, two upsample+conv
stages, 7x7 egress conv to tanh) emitting an additive mask with the
same spatial size as its input. Instance norm throughout, so behavior
is batch-size independent. A width multiplier scales every channel
count for desk-scale runs.

The discriminator is a strided patch classifier: five stride-2 convs
with batch norm and leaky relu, then a 1x1 conv head producing a small
grid of per-patch logits.
"""

from __future__ import annotations

import hashlib
import json
import os

import torch
import torch.nn as nn

from .errors import CheckpointMismatchError, ShapeMismatchError


def _scaled(base: int, width: float) -> int:
    return max(8, int(round(base * width)))


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.block(x)


class MaskGenerator(nn.Module):
    """Emits an additive perturbation mask in [-1, 1] for each input.

    `in_channels=3` consumes the probe alone; `in_channels=6` consumes a
    probe/target pair stacked on the channel axis (used when synthesis
    is conditioned on a target identity).
    """

    def __init__(self, in_channels: int = 3, width: float = 1.0, n_res_blocks: int = 3):
        super().__init__()
        if in_channels not in (3, 6):
            raise ShapeMismatchError(f"in_channels must be 3 or 6, got {in_channels}")
        c64, c128, c256 = (_scaled(k, width) for k in (64, 128, 256))
        self.encoder = nn.Sequential(
            nn.Conv2d(in_channels, c64, 7, padding=3, padding_mode="reflect"),
            nn.InstanceNorm2d(c64),
            nn.ReLU(inplace=True),
            nn.Conv2d(c64, c128, 4, stride=2, padding=1),
            nn.InstanceNorm2d(c128),
            nn.ReLU(inplace=True),
            nn.Conv2d(c128, c256, 4, stride=2, padding=1),
            nn.InstanceNorm2d(c256),
            nn.ReLU(inplace=True),
        )
        self.trunk = nn.Sequential(*[ResidualBlock(c256) for _ in range(n_res_blocks)])
        self.decoder = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(c256, c128, 5, padding=2),
            nn.InstanceNorm2d(c128),
            nn.ReLU(inplace=True),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(c128, c64, 5, padding=2),
            nn.InstanceNorm2d(c64),
            nn.ReLU(inplace=True),
            nn.Conv2d(c64, 3, 7, padding=3, padding_mode="reflect"),
            nn.Tanh(),
        )
        self.arch = {
            "kind": "mask_generator",
            "in_channels": in_channels,
            "width": width,
            "n_res_blocks": n_res_blocks,
        }

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.arch["in_channels"]:
            raise ShapeMismatchError(
                f"generator expects Nx{self.arch['in_channels']}xHxW, "
                f"got {tuple(x.shape)}"
            )
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ShapeMismatchError(
                f"spatial size must be divisible by 4, got {tuple(x.shape[2:])}"
            )
        return self.decoder(self.trunk(self.encoder(x)))

    def zero_output_layer(self) -> None:
        """Zero the egress conv so the initial mask is identically zero."""
        final = self.decoder[-2]
        nn.init.zeros_(final.weight)
        nn.init.zeros_(final.bias)


class PatchDiscriminator(nn.Module):
    """Per-patch real/fake logits over a 1/32-resolution grid."""

    def __init__(self, width: float = 1.0, head_filters: int = 3):
        super().__init__()
        chans = [_scaled(k, width) for k in (32, 64, 128, 256, 512)]
        layers, prev = [], 3
        for i, ch in enumerate(chans):
            layers.append(nn.Conv2d(prev, ch, 4, stride=2, padding=1))
            if i > 0:
                layers.append(nn.BatchNorm2d(ch))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            prev = ch
        layers.append(nn.Conv2d(prev, head_filters, 1))
        self.net = nn.Sequential(*layers)
        self.arch = {
            "kind": "patch_discriminator",
            "width": width,
            "head_filters": head_filters,
        }

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeMismatchError(f"discriminator expects Nx3xHxW, got {tuple(x.shape)}")
        if x.shape[2] % 32 or x.shape[3] % 32:
            raise ShapeMismatchError(
                f"spatial size must be divisible by 32, got {tuple(x.shape[2:])}"
            )
        return self.net(x)


def compose(probe: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Apply an additive mask to a normalized probe, clamped to [-1, 1].

    The mask lives on the [0, 1]-scale image, so on the [-1, 1] scale its
    contribution is doubled: x_adv = clamp(x + 2*mask). Written this way
    the zero mask reproduces the probe bit for bit.
    """
    if probe.shape != mask.shape:
        raise ShapeMismatchError(
            f"probe {tuple(probe.shape)} and mask {tuple(mask.shape)} differ"
        )
    return torch.clamp(probe + 2.0 * mask, -1.0, 1.0)


def arch_fingerprint(arch: dict) -> str:
    blob = json.dumps(arch, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_module(module: nn.Module, path: str, extra: dict | None = None) -> None:
    """Checkpoint a generator or discriminator with its arch fingerprint."""
    arch = getattr(module, "arch", None)
    if arch is None:
        raise CheckpointMismatchError("module lacks an architecture record")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    torch.save(
        {
            "state_dict": module.state_dict(),
            "arch": arch,
            "fingerprint": arch_fingerprint(arch),
            "extra": extra or {},
        },
        path,
    )


def load_module(path: str) -> tuple[nn.Module, dict]:
    """Restore a checkpointed network; returns (module, extra metadata)."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    arch = payload.get("arch")
    if arch is None or payload.get("fingerprint") != arch_fingerprint(arch):
        raise CheckpointMismatchError(f"{path}: architecture record missing or altered")
    kind = arch.get("kind")
    if kind == "mask_generator":
        module: nn.Module = MaskGenerator(
            in_channels=arch["in_channels"],
            width=arch["width"],
            n_res_blocks=arch["n_res_blocks"],
        )
    elif kind == "patch_discriminator":
        module = PatchDiscriminator(
            width=arch["width"], head_filters=arch["head_filters"]
        )
    else:
        raise CheckpointMismatchError(f"{path}: unknown module kind {kind!r}")
    try:
        module.load_state_dict(payload["state_dict"])
    except RuntimeError as e:
        raise CheckpointMismatchError(f"{path}: weights do not fit {kind}: {e}") from e
    return module, payload.get("extra", {})
