"""Image-quality (PSNR, RMSE, SSIM, FID) and segmentation (Dice, Sen, Spec) metrics.

All functions take numpy arrays (or CTImage) with intensities in [0, 1].
FID values depend on the embedding network and are only comparable between
runs that used the same extractor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
from scipy import stats

from .data import CTImage, ShapeError


def _arr(x) -> np.ndarray:
    if isinstance(x, CTImage):
        x = x.intensities
    return np.asarray(x, dtype=np.float64)


def _pair(a, b):
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ShapeError(f"images differ in size: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b, mask=None) -> float:
    a, b = _pair(a, b)
    d = (a - b) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape:
            raise ShapeError("mask size differs from images")
        if not mask.any():
            return 0.0
        d = d[mask]
    return float(d.mean())


def rmse(a, b, mask=None) -> float:
    return math.sqrt(mse(a, b, mask))


def psnr(a, b, peak: float = 1.0, cap: float = 100.0, mask=None) -> float:
    """10 log10(peak^2 / MSE) in dB; identical inputs return ``cap``."""
    err = mse(a, b, mask)
    if err == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(peak * peak / err))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    w = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(x, w, axis=1) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, w, axis=0) @ g


def ssim_map(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
             data_range: float = 1.0) -> np.ndarray:
    a, b = _pair(a, b)
    if a.ndim != 2 or min(a.shape) < window:
        raise ShapeError(f"image {a.shape} is smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean SSIM over every fully-contained Gaussian window (no padding)."""
    return float(ssim_map(a, b, window, sigma, k1, k2, data_range).mean())


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def fid(feats_real, feats_fake) -> float:
    """Frechet distance between Gaussian fits of two embedding sets.

    trace((S_r S_f)^{1/2}) is evaluated as trace((S_r^{1/2} S_f S_r^{1/2})^{1/2}), a symmetric
    PSD product, with negative eigenvalues clamped to zero.
    """
    xr = np.asarray(feats_real, dtype=np.float64)
    xf = np.asarray(feats_fake, dtype=np.float64)
    if xr.ndim == 1:
        xr = xr[:, None]
    if xf.ndim == 1:
        xf = xf[:, None]
    if xr.shape[0] < 2 or xf.shape[0] < 2:
        raise ValueError("fid needs at least two vectors per set")
    if xr.shape[1] != xf.shape[1]:
        raise ShapeError(f"embedding dims differ: {xr.shape[1]} vs {xf.shape[1]}")
    mu_r, mu_f = xr.mean(0), xf.mean(0)
    s_r = np.atleast_2d(np.cov(xr, rowvar=False))
    s_f = np.atleast_2d(np.cov(xf, rowvar=False))
    root_r = _sqrtm_psd(s_r)
    w = np.linalg.eigvalsh(root_r @ s_f @ root_r)
    tr_cross = np.sqrt(np.clip(w, 0.0, None)).sum()
    d = float(((mu_r - mu_f) ** 2).sum() + np.trace(s_r) + np.trace(s_f) - 2.0 * tr_cross)
    return max(d, 0.0)


# -- embeddings ---------------------------------------------------------------


class RandomConvExtractor(nn.Module):
    """Fixed-seed random convolutional features: three conv+ReLU stages, mean and std pooled."""

    def __init__(self, embed_dim: int = 64, seed: int = 0):
        super().__init__()
        if embed_dim % 2:
            raise ValueError("embed_dim must be even")
        gen = torch.Generator().manual_seed(seed)
        half = embed_dim // 2
        self.convs = nn.ModuleList([nn.Conv2d(1, 16, 3, 2, 1), nn.Conv2d(16, 32, 3, 2, 1), nn.Conv2d(32, half, 3, 2, 1)])
        with torch.no_grad():
            for c in self.convs:
                fan_in = c.in_channels * 9
                c.weight.copy_(torch.randn(c.weight.shape, generator=gen) / math.sqrt(fan_in))
                c.bias.copy_(torch.randn(c.bias.shape, generator=gen) * 0.1)
        self.embed_dim = embed_dim
        self.requires_grad_(False)

    def forward(self, x):
        for c in self.convs:
            x = torch.relu(c(x))
        return torch.cat([x.mean(dim=(2, 3)), x.std(dim=(2, 3))], dim=1)

    def __call__(self, images):
        t = torch.as_tensor(np.asarray(images, dtype=np.float32))
        if t.dim() == 3:
            t = t[:, None]
        with torch.no_grad():
            return super().__call__(t).double().numpy()


EXTRACTORS: dict[str, Callable[..., Callable]] = {"random_conv": RandomConvExtractor}


def get_extractor(name: str, **kwargs) -> Callable:
    from .config import ConfigError

    if name not in EXTRACTORS:
        raise ConfigError(f"eval.extractor: unknown extractor {name!r} (known: {sorted(EXTRACTORS)})")
    return EXTRACTORS[name](**kwargs)


def embed(images, extractor: Callable | None) -> np.ndarray:
    """Embed a batch (N, H, W) or list of images; ``extractor`` maps (N,1,H,W) float arrays to (N, D)."""
    from .config import ConfigError

    if extractor is None:
        raise ConfigError("eval.extractor: no embedding extractor configured")
    arr = np.stack([_arr(im) for im in images]).astype(np.float32)
    return np.asarray(extractor(arr[:, None]), dtype=np.float64)


# -- segmentation ---------------------------------------------------------------


def _ratio(num: int, den: int, both_empty: bool) -> float:
    """num/den, with the empty-denominator convention: 1.0 if both masks are empty for this term, else 0.0."""
    if den == 0:
        return 1.0 if both_empty else 0.0
    return num / den


def confusion(pred, truth) -> tuple[int, int, int, int]:
    p = np.asarray(pred, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    if p.shape != t.shape:
        raise ShapeError(f"masks differ in size: {p.shape} vs {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(np.count_nonzero(~p & ~t))
    return tp, fp, fn, tn


def dice_sen_spec(pred, truth) -> tuple[float, float, float]:
    tp, fp, fn, tn = confusion(pred, truth)
    dice = _ratio(2 * tp, 2 * tp + fp + fn, both_empty=(tp + fp + fn) == 0)
    sen = _ratio(tp, tp + fn, both_empty=(tp + fp) == 0)
    spec = _ratio(tn, tn + fp, both_empty=(tn + fn) == 0)
    return dice, sen, spec


# -- fold aggregation ------------------------------------------------------------


@dataclass(frozen=True)
class MetricReport:
    values: tuple[float, ...]
    fold_means: tuple[float, ...]
    mean: float
    ci95: float

    @property
    def n_folds(self) -> int:
        return len(self.fold_means)

    def __str__(self):
        return f"{self.mean:.4f} ± {self.ci95:.4f}"


def fold_report(values, n_folds: int = 10) -> MetricReport:
    """Split values into n_folds contiguous folds; mean of fold means and Student-t 95% half-width."""
    vals = [float(v) for v in values]
    if n_folds < 1 or n_folds > len(vals):
        raise ValueError(f"cannot split {len(vals)} values into {n_folds} folds")
    folds = np.array_split(np.arange(len(vals)), n_folds)
    means = [math.fsum(vals[i] for i in idx) / len(idx) for idx in folds]
    grand = math.fsum(means) / n_folds
    if n_folds == 1:
        ci = float("nan")
    else:
        sd = math.sqrt(math.fsum((m - grand) ** 2 for m in means) / (n_folds - 1))
        ci = float(stats.t.ppf(0.975, n_folds - 1) * sd / math.sqrt(n_folds))
    return MetricReport(tuple(vals), tuple(means), grand, ci)
