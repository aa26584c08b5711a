"""Global-local generator with the dynamic element-wise sum bridge.

G1 (global) works on the half-resolution map: 7x7 stem, three stride-2
downsamples to base/16, nine residual blocks, three transposed-conv
upsamples, 7x7 tanh head. G2 (local) works at full resolution: 7x7 stem,
one downsample to base/2, fusion with G1's last upsample activation,
three residual blocks, one upsample, 7x7 tanh head. Outputs are rescaled
from tanh's [-1, 1] to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .data import N_CLASSES, ShapeError, half_onehot_t


@dataclass(frozen=True)
class GeneratorConfig:
    base_resolution: int = 512
    base_channels: int = 64
    n_residual_blocks: int = 9
    n_downsamples_g1: int = 3
    n_residual_blocks_g2: int = 3
    use_desum: bool = True
    fixed_alpha: float | None = None
    n_generators: int = 2
    # AlphaNet input: "concat" (f_local ++ f_global), "local" or "global" only
    alpha_input: str = "concat"
    alpha_hidden: int = 32
    supervise_g1_joint: bool = True
    # replaces G1's feature by zeros before fusion (diagnostic twin of use_desum=False)
    zero_f_global: bool = False

    def __post_init__(self):
        if self.fixed_alpha is not None and not 0.0 <= self.fixed_alpha <= 1.0:
            raise ValueError(f"fixed_alpha must lie in [0, 1], got {self.fixed_alpha}")
        if self.n_generators not in (1, 2, 3):
            raise ValueError(f"n_generators must be 1, 2 or 3, got {self.n_generators}")
        if self.alpha_input not in ("concat", "local", "global"):
            raise ValueError(f"alpha_input must be concat, local or global, got {self.alpha_input!r}")
        if self.base_resolution % (2 ** (self.n_downsamples_g1 + 2)):
            raise ValueError(
                f"base_resolution {self.base_resolution} must be divisible by {2 ** (self.n_downsamples_g1 + 2)}"
            )
        if self.base_channels < 2 or self.base_channels % 2:
            raise ValueError("base_channels must be an even number >= 2")

    @property
    def local_channels(self) -> int:
        return self.base_channels // 2


def _norm(c: int) -> nn.Module:
    return nn.InstanceNorm2d(c, affine=False)


def _stem(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(cin, cout, 7), _norm(cout), nn.ReLU(True))


def _down(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=2, padding=1), _norm(cout), nn.ReLU(True))


def _up(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.ConvTranspose2d(cin, cout, 3, stride=2, padding=1, output_padding=1), _norm(cout), nn.ReLU(True)
    )


def _head(cin: int) -> nn.Sequential:
    return nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(cin, 1, 7), nn.Tanh())


class ResidualBlock(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(c, c, 3), _norm(c), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(c, c, 3), _norm(c),
        )

    def forward(self, x):
        return x + self.body(x)


def to_unit(t: torch.Tensor) -> torch.Tensor:
    return (t + 1.0) * 0.5


def desum(f_local: torch.Tensor, f_global: torch.Tensor, alpha) -> torch.Tensor:
    """Dynamic element-wise sum: alpha * f_local + (1 - alpha) * f_global.

    ``alpha`` may be a float, a 0-d tensor or a per-sample tensor of shape (B,).
    """
    if f_local.shape != f_global.shape:
        raise ShapeError(f"desum operands differ: {tuple(f_local.shape)} vs {tuple(f_global.shape)}")
    if isinstance(alpha, torch.Tensor) and alpha.dim() == 1:
        alpha = alpha.view(-1, *([1] * (f_local.dim() - 1)))
    return alpha * f_local + (1.0 - alpha) * f_global


class GlobalGenerator(nn.Module):
    """G1. Returns (image in [0,1], f_global) where f_global is the last upsample activation."""

    def __init__(self, in_channels: int, ngf: int, n_down: int, n_blocks: int):
        super().__init__()
        self.stem = _stem(in_channels, ngf)
        self.down = nn.ModuleList(_down(ngf * 2**i, ngf * 2 ** (i + 1)) for i in range(n_down))
        self.blocks = nn.Sequential(*(ResidualBlock(ngf * 2**n_down) for _ in range(n_blocks)))
        self.up = nn.ModuleList(_up(ngf * 2 ** (i + 1), ngf * 2**i) for i in reversed(range(n_down)))
        self.head = _head(ngf)

    def forward(self, m, inject=None):
        """``inject`` is an optional callable applied to the first downsample output (G0 fusion)."""
        h = self.stem(m)
        for i, layer in enumerate(self.down):
            h = layer(h)
            if i == 0 and inject is not None:
                h = inject(h)
        h = self.blocks(h)
        for layer in self.up:
            h = layer(h)
        return to_unit(self.head(h)), h


class LocalGenerator(nn.Module):
    """G2. Fuses f_global into its post-downsample feature before the residual blocks."""

    def __init__(self, in_channels: int, ngf: int, n_blocks: int):
        super().__init__()
        cl = ngf // 2
        self.stem = _stem(in_channels, cl)
        self.down = _down(cl, ngf)
        self.blocks = nn.Sequential(*(ResidualBlock(ngf) for _ in range(n_blocks)))
        self.up = _up(ngf, cl)
        self.head = _head(cl)

    def encode(self, m):
        return self.down(self.stem(m))

    def decode(self, fused):
        return to_unit(self.head(self.up(self.blocks(fused))))


class AlphaNet(nn.Module):
    """Three stride-2 convs, global average pool, two linear layers, sigmoid."""

    def __init__(self, in_channels: int, hidden: int = 32):
        super().__init__()
        self.convs = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(hidden, hidden, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(hidden, hidden, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
        )
        self.fc = nn.Sequential(nn.Linear(hidden, hidden), nn.LeakyReLU(0.2), nn.Linear(hidden, 1))

    def forward(self, x):
        pooled = self.convs(x).mean(dim=(2, 3))
        return torch.sigmoid(self.fc(pooled)).squeeze(1)


@dataclass
class GeneratorOutput:
    image_full: torch.Tensor
    image_half: torch.Tensor | None
    alpha: torch.Tensor | None


class GlobalLocalGenerator(nn.Module):
    """G = (G1, G2) plus AlphaNet; with n_generators=3 a quarter-resolution G0 feeds G1."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        ngf = cfg.base_channels
        if cfg.n_generators >= 2:
            self.g1 = GlobalGenerator(N_CLASSES, ngf, cfg.n_downsamples_g1, cfg.n_residual_blocks)
        self.g2 = LocalGenerator(N_CLASSES, ngf, cfg.n_residual_blocks_g2)
        alpha_in = 2 * ngf if cfg.alpha_input == "concat" else ngf
        self.alpha_net = AlphaNet(alpha_in, cfg.alpha_hidden)
        if cfg.n_generators == 3:
            # G0 at quarter resolution; its top feature has 2*ngf channels to match G1's first downsample
            self.g0 = GlobalGenerator(N_CLASSES, 2 * ngf, max(cfg.n_downsamples_g1 - 1, 1), cfg.n_residual_blocks)
            self.alpha_net0 = AlphaNet(4 * ngf, cfg.alpha_hidden)

    # -- individual pieces ----------------------------------------------------

    def _check(self, m, res):
        if m.dim() != 4 or m.shape[1] != N_CLASSES or m.shape[-1] != res or m.shape[-2] != res:
            raise ShapeError(f"expected map (B, {N_CLASSES}, {res}, {res}), got {tuple(m.shape)}")

    def g1_forward(self, map_half, inject=None):
        self._check(map_half, self.cfg.base_resolution // 2)
        return self.g1(map_half, inject)

    def alpha_forward(self, f_local, f_global):
        cfg = self.cfg
        if cfg.fixed_alpha is not None:
            return torch.full((f_local.shape[0],), cfg.fixed_alpha, dtype=f_local.dtype, device=f_local.device)
        if cfg.alpha_input == "concat":
            x = torch.cat([f_local, f_global], dim=1)
        elif cfg.alpha_input == "local":
            x = f_local
        else:
            x = f_global
        return self.alpha_net(x)

    def g2_forward(self, map_full, f_global=None, alpha=None):
        """Full-resolution synthesis. f_global=None means individual training (no fusion)."""
        self._check(map_full, self.cfg.base_resolution)
        f_local = self.g2.encode(map_full)
        if f_global is None or not self.cfg.use_desum:
            fused = f_local
        else:
            if f_global.shape != f_local.shape:
                raise ShapeError(f"f_global {tuple(f_global.shape)} does not match f_local {tuple(f_local.shape)}")
            if alpha is None:
                alpha = self.alpha_forward(f_local, f_global)
            fused = desum(f_local, f_global, alpha)
        return self.g2.decode(fused), f_local, alpha

    def _g0_inject(self, map_half):
        m_quarter = half_onehot_t(map_half)
        _, f0 = self.g0(m_quarter)

        def fuse(h):
            a0 = self.alpha_net0(torch.cat([h, f0], dim=1))
            return desum(h, f0, a0)

        return fuse

    # -- joint -----------------------------------------------------------------

    def forward(self, map_full) -> GeneratorOutput:
        self._check(map_full, self.cfg.base_resolution)
        cfg = self.cfg
        if cfg.n_generators == 1:
            f_local = self.g2.encode(map_full)
            f_global = torch.zeros_like(f_local)
            alpha = self.alpha_forward(f_local, f_global) if cfg.use_desum else None
            fused = desum(f_local, f_global, alpha) if cfg.use_desum else f_local
            return GeneratorOutput(self.g2.decode(fused), None, alpha)
        map_half = half_onehot_t(map_full)
        inject = self._g0_inject(map_half) if cfg.n_generators == 3 else None
        image_half, f_global = self.g1_forward(map_half, inject)
        if cfg.zero_f_global:
            f_global = torch.zeros_like(f_global)
        if not cfg.use_desum:
            image_full, _, _ = self.g2_forward(map_full, None)
            return GeneratorOutput(image_full, image_half, None)
        image_full, _, alpha = self.g2_forward(map_full, f_global)
        return GeneratorOutput(image_full, image_half, alpha)

    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        groups = {"G2": list(self.g2.parameters()), "AlphaNet": list(self.alpha_net.parameters())}
        if hasattr(self, "g1"):
            groups["G1"] = list(self.g1.parameters())
        if hasattr(self, "g0"):
            groups["G0"] = list(self.g0.parameters()) + list(self.alpha_net0.parameters())
        return groups


def generator_layer_table(cfg: GeneratorConfig, batch: int = 1) -> list[tuple[str, tuple[int, ...]]]:
    """Documented output dims of every generator stage for a configuration."""
    B, R, c = batch, cfg.base_resolution, cfg.base_channels
    nd = cfg.n_downsamples_g1
    rows: list[tuple[str, tuple[int, ...]]] = []
    if cfg.n_generators >= 2:
        h = R // 2
        rows.append(("g1.stem", (B, c, h, h)))
        for i in range(nd):
            rows.append((f"g1.down.{i}", (B, c * 2 ** (i + 1), h // 2 ** (i + 1), h // 2 ** (i + 1))))
        bott = h // 2**nd
        rows.append(("g1.blocks", (B, c * 2**nd, bott, bott)))
        for j, i in enumerate(reversed(range(nd))):
            rows.append((f"g1.up.{j}", (B, c * 2**i, h // 2**i, h // 2**i)))
        rows.append(("g1.head", (B, 1, h, h)))
    cl = c // 2
    rows += [
        ("g2.stem", (B, cl, R, R)),
        ("g2.down", (B, c, R // 2, R // 2)),
        ("g2.blocks", (B, c, R // 2, R // 2)),
        ("g2.up", (B, cl, R, R)),
        ("g2.head", (B, 1, R, R)),
    ]
    return rows


def trace_layer_shapes(gen: GlobalLocalGenerator, map_full: torch.Tensor) -> dict[str, tuple[int, ...]]:
    """Run a forward pass and record output dims of the modules named in generator_layer_table."""
    shapes: dict[str, tuple[int, ...]] = {}
    handles = []
    for name, mod in gen.named_modules():
        if name.count(".") <= 2 and (name.split(".")[0] in ("g1", "g2")) and name not in ("g1", "g2"):
            handles.append(mod.register_forward_hook(
                lambda _m, _i, out, name=name: shapes.__setitem__(name, tuple(out.shape))
            ))
    try:
        with torch.no_grad():
            gen(map_full)
    finally:
        for h in handles:
            h.remove()
    return shapes
