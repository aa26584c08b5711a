"""U-Net segmentation harness for the real/synthetic data-mixing experiments.

Two protocols: ``replace`` keeps the training-set size fixed and swaps a
fraction of real slices for synthetic ones; ``add`` keeps every real slice
and appends synthetic ones. Each cell trains a fresh U-Net and reports
Dice / Sen / Spec for GGO, consolidation and their union, as fold means with
a 95% t-interval.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import SegConfig
from .data import CONSOLIDATION, GGO, N_CLASSES, PairedSample, SegMap, CTImage
from .metrics import MetricReport, dice_sen_spec, fold_report
from .phantom import AugmentConfig, augment, sample_rng
from .synthesis import composite, synthesize_batch

log = logging.getLogger(__name__)

FOCUS = {"ggo": (GGO,), "consolidation": (CONSOLIDATION,), "infection": (GGO, CONSOLIDATION)}
METRIC_COLUMNS = tuple(f"{c}_{m}" for c in FOCUS for m in ("dice", "sen", "spec"))
VALID_RATIOS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)


@dataclass(frozen=True)
class MixSpec:
    mode: str
    ratio: float
    source: str = "ours"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("replace", "add"):
            raise ValueError(f"mode must be replace or add, got {self.mode!r}")
        if not any(abs(self.ratio - r) < 1e-9 for r in VALID_RATIOS):
            raise ValueError(f"ratio must be one of {VALID_RATIOS}, got {self.ratio}")


def _double_conv(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(True),
        nn.Conv2d(cout, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(True),
    )


class UNet(nn.Module):
    def __init__(self, base_channels: int = 32, depth: int = 4, in_channels: int = 1, n_classes: int = N_CLASSES):
        super().__init__()
        if depth < 2:
            raise ValueError("depth must be >= 2")
        chans = [base_channels * 2**i for i in range(depth)]
        self.enc = nn.ModuleList()
        cin = in_channels
        for c in chans:
            self.enc.append(_double_conv(cin, c))
            cin = c
        self.up = nn.ModuleList(nn.ConvTranspose2d(chans[i + 1], chans[i], 2, stride=2) for i in reversed(range(depth - 1)))
        self.dec = nn.ModuleList(_double_conv(2 * chans[i], chans[i]) for i in reversed(range(depth - 1)))
        self.out = nn.Conv2d(chans[0], n_classes, 1)

    def forward(self, x):
        skips = []
        for i, blk in enumerate(self.enc):
            x = blk(x if i == 0 else F.max_pool2d(x, 2))
            skips.append(x)
        skips.pop()
        for up, dec in zip(self.up, self.dec):
            x = dec(torch.cat([skips.pop(), up(x)], dim=1))
        return self.out(x)


def build_unet(base_channels: int = 32, depth: int = 4) -> UNet:
    return UNet(base_channels, depth)


def unet_layer_table(base_channels: int, depth: int, resolution: int, batch: int = 1):
    rows = []
    for i in range(depth):
        r = resolution // 2**i
        rows.append((f"enc.{i}", (batch, base_channels * 2**i, r, r)))
    for j, i in enumerate(reversed(range(depth - 1))):
        r = resolution // 2**i
        rows.append((f"up.{j}", (batch, base_channels * 2**i, r, r)))
        rows.append((f"dec.{j}", (batch, base_channels * 2**i, r, r)))
    rows.append(("out", (batch, N_CLASSES, resolution, resolution)))
    return rows


# -- data mixing ---------------------------------------------------------------


def mix_dataset(real_pool: list[PairedSample], synth_pool: list[PairedSample], spec: MixSpec) -> list[PairedSample]:
    """Training manifest for one mixing cell; kept real slices stay in their original order."""
    n = len(real_pool)
    k = int(round(spec.ratio * n))
    rng = np.random.default_rng([spec.seed, 1 if spec.mode == "replace" else 2, int(round(spec.ratio * 10))])
    if k > len(synth_pool):
        raise ValueError(f"synthetic pool has {len(synth_pool)} samples, {k} needed")
    if k == 0:
        return list(real_pool)
    synth_idx = np.sort(rng.choice(len(synth_pool), size=k, replace=False))
    synth = [synth_pool[i] for i in synth_idx]
    if spec.mode == "replace":
        keep = np.sort(rng.choice(n, size=n - k, replace=False))
        real = [real_pool[i] for i in keep]
    else:
        real = list(real_pool)
    out = real + synth
    ids = [s.id for s in out]
    if len(set(ids)) != len(ids):
        raise ValueError("mixed manifest contains duplicate sample ids")
    return out


def build_synthetic_pool(gen, source: list[PairedSample], aug: AugmentConfig, seed: int,
                         multiplier: int = 1, batch: int = 16) -> list[PairedSample]:
    """Synthesise from augmented copies of the source maps, composited into the augmented real slice."""
    pairs = []
    for s in source:
        for k in range(multiplier):
            pairs.append(augment(s, aug, sample_rng(seed, f"syn-{s.id}", 1000 + k)))
    out = []
    for i in range(0, len(pairs), batch):
        chunk = pairs[i:i + batch]
        imgs = synthesize_batch(gen, [p.map for p in chunk])
        for j, (p, img) in enumerate(zip(chunk, imgs)):
            k = (i + j) % multiplier
            out.append(PairedSample(p.map, composite(img, p.image, p.map), f"syn-{p.id}-{k}", p.patient_tag))
    return out


# -- training / evaluation ---------------------------------------------------------


def _tensors(samples):
    x = torch.from_numpy(np.stack([s.image.intensities for s in samples])[:, None].astype(np.float32))
    y = torch.from_numpy(np.stack([s.map.labels for s in samples]).astype(np.int64))
    return x, y


def train_unet(samples: list[PairedSample], cfg: SegConfig, seed: int) -> UNet:
    torch.manual_seed(seed)
    model = build_unet(cfg.base_channels, cfg.depth)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.5, 0.999))
    x, y = _tensors(samples)
    n = len(samples)
    bs = min(cfg.batch_size, n)
    rng = np.random.default_rng([seed, 7])
    order = np.concatenate([rng.permutation(n) for _ in range(cfg.steps * bs // n + 1)])
    model.train()
    for step in range(cfg.steps):
        idx = torch.from_numpy(order[step * bs:(step + 1) * bs])
        loss = F.cross_entropy(model(x[idx]), y[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    model.eval()
    return model


def predict(model: UNet, images: list[CTImage], batch: int = 16) -> list[SegMap]:
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            x = torch.from_numpy(np.stack([im.intensities for im in images[i:i + batch]])[:, None])
            out.extend(SegMap(p.numpy()) for p in model(x).argmax(dim=1))
    return out


def segmentation_scores(preds: list[SegMap], truths: list[SegMap]) -> dict[str, list[float]]:
    """Per-sample Dice/Sen/Spec (in percent) for each focus class."""
    scores = {c: [] for c in METRIC_COLUMNS}
    for p, t in zip(preds, truths):
        for name, classes in FOCUS.items():
            d, se, sp = dice_sen_spec(np.isin(p.labels, classes), np.isin(t.labels, classes))
            scores[f"{name}_dice"].append(100.0 * d)
            scores[f"{name}_sen"].append(100.0 * se)
            scores[f"{name}_spec"].append(100.0 * sp)
    return scores


@dataclass
class CellResult:
    spec: MixSpec
    n_train: int
    reports: dict[str, MetricReport] = field(default_factory=dict)
    error: str | None = None


def run_cell(train_set, eval_set, cfg: SegConfig, seed: int) -> dict[str, MetricReport]:
    model = train_unet(train_set, cfg, seed)
    preds = predict(model, [s.image for s in eval_set])
    scores = segmentation_scores(preds, [s.map for s in eval_set])
    return {k: fold_report(v, min(cfg.n_folds, len(v))) for k, v in scores.items()}


def run_experiment(grid: list[MixSpec], real_pool, synth_pool, eval_set, cfg: SegConfig) -> list[CellResult]:
    """Train and score one U-Net per grid cell. Identical (manifest, seed) cells are computed once."""
    cache: dict = {}
    results = []
    for spec in grid:
        res = CellResult(spec, 0)
        try:
            train_set = mix_dataset(real_pool, synth_pool, spec)
            res.n_train = len(train_set)
            key = (tuple(s.id for s in train_set), spec.seed)
            if key not in cache:
                cache[key] = run_cell(train_set, eval_set, cfg, spec.seed)
            res.reports = cache[key]
        except Exception as exc:  # noqa: BLE001 - a failed cell is recorded, the grid continues
            log.error("cell %s failed: %s", spec, exc)
            res.error = str(exc)
        results.append(res)
    return results


def split_pools(manifest) -> tuple[list[PairedSample], list[PairedSample]]:
    """Segmentation (train, eval) pools.

    Real training slices come from the synthesis test split; evaluation uses the
    synthesis training split, swapping the two roles as the experiment protocol does.
    """
    return manifest.materialize("test_synth"), manifest.materialize("train_synth")


def write_table(results: list[CellResult], path) -> Path:
    """CSV shaped like the mixing tables: mode, ratio, seed, then 9 'mean±ci' columns."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "ratio", "seed", "n_train", *METRIC_COLUMNS, "error"])
        for r in results:
            cells = [f"{r.reports[c].mean:.2f}±{r.reports[c].ci95:.2f}" if c in r.reports else "" for c in METRIC_COLUMNS]
            w.writerow([r.spec.mode, f"{r.spec.ratio:.1f}", r.spec.seed, r.n_train, *cells, r.error or ""])
    return path


def write_long_report(results: list[CellResult], path) -> Path:
    """Long-form CSV: mode, ratio, seed, metric, fold, value, mean, ci95."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "ratio", "seed", "metric", "fold", "value", "mean", "ci95"])
        for r in results:
            for metric, rep in r.reports.items():
                for f, v in enumerate(rep.fold_means):
                    w.writerow([r.spec.mode, f"{r.spec.ratio:.1f}", r.spec.seed, metric, f, repr(v), repr(rep.mean),
                                repr(rep.ci95)])
    return path


def seg_experiment(cfg, gen) -> list[CellResult]:
    """Full mixing grid (modes x ratios x seeds) for a run config and a trained generator."""
    from .phantom import dataset_from_config

    manifest = dataset_from_config(cfg.data, cfg.augment)
    real, ev = split_pools(manifest)
    if cfg.seg.eval_split == "test_seg":
        ev = manifest.materialize("test_seg")
    synth = build_synthetic_pool(gen, real, cfg.augment, cfg.data.seed, cfg.seg.synth_multiplier)
    grid = [MixSpec(mode, r, "ours", s) for mode in cfg.seg.modes for r in cfg.seg.ratios for s in cfg.seg.seeds]
    return run_experiment(grid, real, synth, ev, cfg.seg)


def seed_mean(results: list[CellResult], mode: str, ratio: float, metric: str = "infection_dice") -> float:
    """Mean over seeds of one cell's fold-mean metric."""
    vals = [r.reports[metric].mean for r in results
            if r.spec.mode == mode and abs(r.spec.ratio - ratio) < 1e-9 and metric in r.reports]
    if not vals:
        raise KeyError(f"no results for {mode} {ratio} {metric}")
    return float(np.mean(vals))


TREND_CELLS = (("add", 0.0), ("add", 0.4), ("replace", 0.5))


def trend_cells(cfg, gen, cells=TREND_CELLS) -> list[CellResult]:
    """Only the listed (mode, ratio) cells, for every seed in ``cfg.seg.seeds``."""
    from .phantom import dataset_from_config

    manifest = dataset_from_config(cfg.data, cfg.augment)
    real, ev = split_pools(manifest)
    if cfg.seg.eval_split == "test_seg":
        ev = manifest.materialize("test_seg")
    synth = build_synthetic_pool(gen, real, cfg.augment, cfg.data.seed, cfg.seg.synth_multiplier)
    grid = [MixSpec(m, r, "ours", s) for s in cfg.seg.seeds for m, r in cells]
    return run_experiment(grid, real, synth, ev, cfg.seg)
