"""Test-time synthesis: segmentation map in, composited CT slice out."""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import RunConfig, from_dict
from .data import (
    CTImage,
    SegMap,
    ShapeError,
    encode_onehot,
    load_image_png,
    load_map_png,
    lung_mask,
    read_manifest,
    save_image_png,
)
from .generator import GlobalLocalGenerator
from .metrics import psnr

log = logging.getLogger(__name__)


def load_generator(path) -> GlobalLocalGenerator:
    meta = ckpt.load_meta(path)
    cfg = from_dict(RunConfig, meta["config"])
    gen = GlobalLocalGenerator(cfg.generator)
    ckpt.load_checkpoint(path, {"generator": gen}, restore_rng=False)
    gen.eval()
    return gen


def synthesize_batch(gen: GlobalLocalGenerator, maps: list[SegMap]) -> list[CTImage]:
    res = gen.cfg.base_resolution
    for m in maps:
        if m.labels.shape != (res, res):
            raise ShapeError(f"map {m.labels.shape} does not match generator resolution {res}")
    x = torch.from_numpy(np.stack([encode_onehot(m).channels for m in maps]))
    was_training = gen.training
    gen.eval()
    with torch.no_grad():
        out = gen(x).image_full.clamp(0.0, 1.0)
    gen.train(was_training)
    return [CTImage(o[0].numpy()) for o in out]


def synthesize(seg: SegMap, gen: GlobalLocalGenerator) -> CTImage:
    """Full-resolution generator output for one map, clamped to [0, 1]."""
    return synthesize_batch(gen, [seg])[0]


def composite(lung_image: CTImage, reference: CTImage, seg: SegMap) -> CTImage:
    """Synthesised pixels inside the lung mask, reference pixels everywhere else."""
    shapes = {lung_image.intensities.shape, reference.intensities.shape, seg.labels.shape}
    if len(shapes) != 1:
        raise ShapeError(f"composite inputs differ in size: {sorted(shapes)}")
    mask = lung_mask(seg).astype(bool)
    return CTImage(np.where(mask, lung_image.intensities, reference.intensities))


def lung_only(image: CTImage, seg: SegMap) -> CTImage:
    """Image restricted to the lung region, zero elsewhere."""
    return CTImage(np.where(lung_mask(seg).astype(bool), image.intensities, np.float32(0.0)))


def lung_psnr(gen: GlobalLocalGenerator, samples, batch: int = 16) -> float:
    """Mean PSNR between synthesised and true images over lung pixels of each sample."""
    vals = []
    for i in range(0, len(samples), batch):
        chunk = samples[i:i + batch]
        outs = synthesize_batch(gen, [s.map for s in chunk])
        for s, o in zip(chunk, outs):
            vals.append(psnr(o, s.image, mask=lung_mask(s.map).astype(bool)))
    return float(np.mean(vals))


def batch_synthesize(manifest, checkpoint, out_dir) -> Path:
    """Write composite/<id>.png and lung/<id>.png per manifest row plus index.csv.

    Failing samples are logged and skipped.
    """
    out_dir = Path(out_dir)
    gen = load_generator(checkpoint)
    rows = read_manifest(manifest)
    base = Path(manifest).parent
    index = []
    for r in rows:
        try:
            mp = Path(r.map_path) if Path(r.map_path).is_absolute() else base / r.map_path
            ip = Path(r.image_path) if Path(r.image_path).is_absolute() else base / r.image_path
            seg, ref = load_map_png(mp), load_image_png(ip)
            syn = synthesize(seg, gen)
            comp_rel, lung_rel = f"composite/{r.id}.png", f"lung/{r.id}.png"
            save_image_png(composite(syn, ref, seg), out_dir / comp_rel)
            save_image_png(lung_only(syn, seg), out_dir / lung_rel)
            index.append((r.id, comp_rel, lung_rel, r.patient_tag))
        except Exception as exc:  # noqa: BLE001 - one bad sample must not stop the batch
            log.error("sample %s failed: %s", r.id, exc)
    idx_path = out_dir / "index.csv"
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(idx_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "composite", "lung", "patient_tag"])
        w.writerows(index)
    return idx_path
