"""Adversarial, dynamic feature matching and combined objectives.

Discriminators emit logits; every loss goes through
``binary_cross_entropy_with_logits`` so logits of +-30 stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .data import ShapeError


@dataclass
class LossReport:
    g_adv: float
    d_adv: float
    dfm: float
    total: float
    alpha: float
    beta: float

    def is_finite(self) -> bool:
        vals = (self.g_adv, self.d_adv, self.dfm, self.total)
        return all(v == v and abs(v) != float("inf") for v in vals)


def _bce(logits: torch.Tensor, target: float) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits, torch.full_like(logits, target))


def cgan_loss_d(real_grids, fake_grids) -> torch.Tensor:
    """Sum over discriminators of 0.5 * (BCE(real, 1) + BCE(fake, 0)), each a patch mean.

    The 0.5 follows the pix2pix convention, so a single discriminator at zero
    logits scores ln 2.
    """
    if len(real_grids) != len(fake_grids):
        raise ValueError("real and fake grid lists differ in length")
    total = 0.0
    for r, f in zip(real_grids, fake_grids):
        total = total + 0.5 * (_bce(r, 1.0) + _bce(f, 0.0))
    return total


def cgan_loss_g(fake_grids, saturating: bool = False) -> torch.Tensor:
    """Generator adversarial loss summed over discriminators.

    Default is the non-saturating form BCE(fake, 1). ``saturating=True`` gives
    the literal minimax term mean(log(1 - D)) = -BCE(fake, 0).
    """
    total = 0.0
    for f in fake_grids:
        total = total + (-_bce(f, 0.0) if saturating else _bce(f, 1.0))
    return total


def feature_matching(real_taps, fake_taps) -> torch.Tensor:
    """Per-sample sum over layers of ||real_i - fake_i||_1 / N_i; returns shape (B,)."""
    if len(real_taps) != len(fake_taps):
        raise ValueError("tap lists differ in length")
    out = 0.0
    for r, f in zip(real_taps, fake_taps):
        if r.shape != f.shape:
            raise ShapeError(f"tap dims differ: {tuple(r.shape)} vs {tuple(f.shape)}")
        out = out + (r - f).abs().flatten(1).mean(dim=1)
    return out


def _as_batch(beta, batch: int, like: torch.Tensor) -> torch.Tensor:
    if not isinstance(beta, torch.Tensor):
        beta = torch.tensor(float(beta), dtype=like.dtype, device=like.device)
    return beta.expand(batch) if beta.dim() == 0 else beta


def dfm_loss(real_taps_d1, fake_taps_d1, real_taps_d2, fake_taps_d2, beta, n_layers: int = 3) -> torch.Tensor:
    """Beta-weighted feature matching across the full- and half-resolution discriminators.

    sum_i [ beta/N_i * |D2^i(real) - D2^i(fake)|_1 + (1-beta)/N_i * |D1^i(real) - D1^i(fake)|_1 ],
    averaged over the batch. ``beta`` is a float or a per-sample tensor.
    """
    for name, taps in (("real_d1", real_taps_d1), ("fake_d1", fake_taps_d1),
                       ("real_d2", real_taps_d2), ("fake_d2", fake_taps_d2)):
        if len(taps) != n_layers:
            raise ValueError(f"{name} has {len(taps)} taps, expected {n_layers}")
    fm1 = feature_matching(real_taps_d1, fake_taps_d1)
    fm2 = feature_matching(real_taps_d2, fake_taps_d2)
    b = _as_batch(beta, fm1.shape[0], fm1)
    return (b * fm2 + (1.0 - b) * fm1).mean()


def total_objective(adv_g, dfm, lam: float):
    """Generator objective adv + lambda * dfm; the discriminator only sees the adversarial part."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return adv_g + lam * dfm
