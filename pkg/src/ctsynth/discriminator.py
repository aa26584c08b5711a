"""Multi-resolution PatchGAN discriminator and the beta weighting network."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .data import N_CLASSES, ShapeError

RESOLUTION_DIVISOR = {"full": 1, "half": 2, "quarter": 4}
NAMES = {"full": "d1", "half": "d2", "quarter": "d3"}


@dataclass(frozen=True)
class DiscriminatorConfig:
    n_layers: int = 3
    base_channels: int = 64
    n_discriminators: int = 2
    fixed_beta: float | None = None
    use_dfm: bool = True
    beta_tap: int = 2
    beta_source: str = "d1"
    beta_hidden: int = 32
    # which optimiser updates BetaNet: "generator" or "discriminator"
    beta_owner: str = "generator"

    def __post_init__(self):
        if self.fixed_beta is not None and not 0.0 <= self.fixed_beta <= 1.0:
            raise ValueError(f"fixed_beta must lie in [0, 1], got {self.fixed_beta}")
        if self.n_discriminators not in (1, 2, 3):
            raise ValueError(f"n_discriminators must be 1, 2 or 3, got {self.n_discriminators}")
        if self.beta_tap not in (1, 2, 3):
            raise ValueError(f"beta_tap must be 1, 2 or 3, got {self.beta_tap}")
        if self.beta_source not in ("d1", "d2"):
            raise ValueError(f"beta_source must be d1 or d2, got {self.beta_source!r}")
        if self.beta_owner not in ("generator", "discriminator"):
            raise ValueError(f"beta_owner must be generator or discriminator, got {self.beta_owner!r}")
        if self.n_layers < 2:
            raise ValueError("n_layers must be >= 2 so that three taps exist")

    @property
    def scales(self) -> tuple[str, ...]:
        return ("full", "half", "quarter")[: self.n_discriminators]


def grid_size(resolution: int, n_layers: int) -> int:
    """Side of the decision grid: n_layers stride-2 blocks, one stride-1 block, stride-1 head (4x4, pad 1)."""
    h = resolution
    for _ in range(n_layers):
        h = (h + 2 - 4) // 2 + 1
    return h - 2


def layers_for(resolution: int, n_layers: int) -> int:
    """Largest depth <= n_layers (and >= 2) whose grid is non-empty at this resolution."""
    n = n_layers
    while n > 2 and grid_size(resolution, n) < 1:
        n -= 1
    return n


def block_channels(ndf: int, n_layers: int) -> list[int]:
    """Output channels of the conv blocks before the logit head."""
    return [ndf * min(2**i, 8) for i in range(n_layers + 1)]


class PatchDiscriminator(nn.Module):
    """PatchGAN: n_layers stride-2 4x4 conv blocks, one stride-1 block, stride-1 logit head.

    With n_layers=3 each logit sees a 70x70 input patch.
    """

    def __init__(self, in_channels: int, ndf: int = 64, n_layers: int = 3):
        super().__init__()
        chans = block_channels(ndf, n_layers)
        blocks = [nn.Sequential(nn.Conv2d(in_channels, chans[0], 4, 2, 1), nn.LeakyReLU(0.2))]
        for i in range(1, n_layers + 1):
            stride = 2 if i < n_layers else 1
            blocks.append(nn.Sequential(
                nn.Conv2d(chans[i - 1], chans[i], 4, stride, 1),
                # running stats make the eval-mode network strictly patch-local
                nn.InstanceNorm2d(chans[i], track_running_stats=True),
                nn.LeakyReLU(0.2),
            ))
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(chans[-1], 1, 4, 1, 1)

    def forward(self, x):
        taps = []
        h = x
        for blk in self.blocks:
            h = blk(h)
            taps.append(h)
        return self.head(h), taps[:3]


class BetaNet(nn.Module):
    def __init__(self, in_channels: int, hidden: int = 32):
        super().__init__()
        self.trunk = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(hidden, hidden, 3, stride=1, padding=1), nn.LeakyReLU(0.2),
        )
        self.fc = nn.Linear(hidden, 1)

    def forward(self, tap):
        return torch.sigmoid(self.fc(self.trunk(tap).mean(dim=(2, 3)))).squeeze(1)


class MultiResolutionDiscriminator(nn.Module):
    """D1 (full), D2 (half) and optionally D3 (quarter), independent parameters, plus BetaNet."""

    def __init__(self, cfg: DiscriminatorConfig, base_resolution: int, image_channels: int = 1):
        super().__init__()
        self.cfg = cfg
        self.base_resolution = base_resolution
        in_ch = N_CLASSES + image_channels
        for scale in cfg.scales:
            res = base_resolution // RESOLUTION_DIVISOR[scale]
            setattr(self, NAMES[scale], PatchDiscriminator(in_ch, cfg.base_channels, layers_for(res, cfg.n_layers)))
        tap_ch = block_channels(cfg.base_channels, cfg.n_layers)[cfg.beta_tap - 1]
        self.beta_net = BetaNet(tap_ch, cfg.beta_hidden)

    def has(self, which: str) -> bool:
        return which in self.cfg.scales

    def d_forward(self, m, image, which: str):
        """Patch logits and the first three block activations for one sub-discriminator."""
        if not self.has(which):
            raise KeyError(f"discriminator {which!r} not configured (n_discriminators={self.cfg.n_discriminators})")
        res = self.base_resolution // RESOLUTION_DIVISOR[which]
        if m.shape[-2:] != (res, res) or image.shape[-2:] != (res, res):
            raise ShapeError(
                f"{which} discriminator expects {res}x{res} inputs, got map {tuple(m.shape[-2:])}"
                f" and image {tuple(image.shape[-2:])}"
            )
        return getattr(self, NAMES[which])(torch.cat([m, image], dim=1))

    def beta_forward(self, tap):
        if self.cfg.fixed_beta is not None:
            return torch.full((tap.shape[0],), self.cfg.fixed_beta, dtype=tap.dtype, device=tap.device)
        return self.beta_net(tap)

    def body_parameters(self):
        """Parameters of D1/D2/D3 without BetaNet."""
        for scale in self.cfg.scales:
            yield from getattr(self, NAMES[scale]).parameters()

    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        groups = {NAMES[s].upper(): list(getattr(self, NAMES[s]).parameters()) for s in self.cfg.scales}
        groups["BetaNet"] = list(self.beta_net.parameters())
        return groups


def discriminator_layer_table(cfg: DiscriminatorConfig, resolution: int, batch: int = 1):
    """Documented dims of each block and the decision grid for a square input of `resolution`."""
    chans = block_channels(cfg.base_channels, cfg.n_layers)
    rows = []
    h = resolution
    for i, c in enumerate(chans):
        stride = 2 if i < cfg.n_layers else 1
        h = (h + 2 - 4) // stride + 1
        rows.append((f"blocks.{i}", (batch, c, h, h)))
    h = h + 2 - 4 + 1
    rows.append(("head", (batch, 1, h, h)))
    return rows
