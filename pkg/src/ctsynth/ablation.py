"""The eleven structural variants of the ablation table and a runner that scores each."""

from __future__ import annotations

import csv
import dataclasses
import logging
from pathlib import Path

import numpy as np

from .config import RunConfig, replace_section
from .metrics import embed, fid, get_extractor
from .phantom import dataset_from_config
from .synthesis import composite, lung_psnr, synthesize_batch
from .trainer import Trainer

log = logging.getLogger(__name__)

ABLATION_ROWS = (
    "Ours",
    "w/o DESUM",
    "using F_global",
    "Fixed alpha=0.5",
    "w/o DFM",
    "using D2 taps",
    "Fixed beta=0.5",
    "D=1",
    "D=3",
    "G=1",
    "G=3",
)


def ablation_config(base: RunConfig, row: str) -> RunConfig:
    g, d = "generator", "discriminator"
    variants = {
        "Ours": lambda c: c,
        "w/o DESUM": lambda c: replace_section(c, g, use_desum=False),
        "using F_global": lambda c: replace_section(c, g, alpha_input="global"),
        "Fixed alpha=0.5": lambda c: replace_section(c, g, fixed_alpha=0.5),
        "w/o DFM": lambda c: replace_section(c, d, use_dfm=False),
        "using D2 taps": lambda c: replace_section(c, d, beta_source="d2"),
        "Fixed beta=0.5": lambda c: replace_section(c, d, fixed_beta=0.5),
        "D=1": lambda c: replace_section(c, d, n_discriminators=1),
        "D=3": lambda c: replace_section(c, d, n_discriminators=3),
        "G=1": lambda c: replace_section(c, g, n_generators=1),
        "G=3": lambda c: replace_section(c, g, n_generators=3),
    }
    if row not in variants:
        raise KeyError(f"unknown ablation row {row!r}")
    return variants[row](base)


def ablation_grid(base: RunConfig) -> list[tuple[str, RunConfig]]:
    return [(row, ablation_config(base, row)) for row in ABLATION_ROWS]


@dataclasses.dataclass
class AblationResult:
    row: str
    fid: float
    psnr: float
    dice: float | None = None
    error: str | None = None


def score_generator(gen, held_out, cfg: RunConfig) -> tuple[float, float]:
    """(FID of composited synthetic vs real held-out slices, mean lung PSNR)."""
    synth = synthesize_batch(gen, [s.map for s in held_out])
    comps = [composite(o, s.image, s.map) for o, s in zip(synth, held_out)]
    ex = get_extractor(cfg.eval.extractor, embed_dim=cfg.eval.embed_dim)
    f = fid(embed([s.image for s in held_out], ex), embed(comps, ex))
    return f, lung_psnr(gen, held_out)


def run_ablation(base: RunConfig, out_dir=None, rows=ABLATION_ROWS, dice_fn=None) -> list[AblationResult]:
    """Train every requested variant from scratch on the same data and score it.

    ``dice_fn(generator, manifest) -> float`` optionally adds a segmentation column.
    """
    manifest = dataset_from_config(base.data, base.augment)
    train, held = manifest.materialize("train_synth"), manifest.materialize("test_synth")
    results = []
    for row in rows:
        cfg = ablation_config(base, row)
        sub = Path(out_dir) / _slug(row) if out_dir is not None else None
        try:
            tr = Trainer(cfg, train, sub)
            tr.run()
            tr.close()
            f, p = score_generator(tr.G, held, cfg)
            dice = dice_fn(tr.G, manifest) if dice_fn is not None else None
            results.append(AblationResult(row, f, p, dice))
        except Exception as exc:  # noqa: BLE001 - one failing variant must not stop the table
            log.error("ablation row %s failed: %s", row, exc)
            results.append(AblationResult(row, float("nan"), float("nan"), None, str(exc)))
    return results


def _slug(row: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in row).strip("_").lower()


def write_ablation_csv(results: list[AblationResult], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with_dice = any(r.dice is not None for r in results)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["Method", "FID", "PSNR"] + (["Dice"] if with_dice else []) + ["error"])
        for r in results:
            dice = [f"{r.dice:.2f}" if r.dice is not None else ""] if with_dice else []
            w.writerow([r.row, _fmt(r.fid, 4), _fmt(r.psnr, 2), *dice, r.error or ""])
    return path


def _fmt(v: float, digits: int) -> str:
    return "" if not np.isfinite(v) else f"{v:.{digits}f}"
