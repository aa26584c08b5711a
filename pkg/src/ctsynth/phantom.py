"""Procedural phantom lungs and the paired augmentation transforms.

A phantom slice is drawn in Hounsfield units (air, soft tissue, a spine disc,
two lung fields with GGO and consolidation blobs) with spatially correlated
noise per tissue class, then windowed to [0, 1] like a real scan.
"""

from __future__ import annotations

import logging
import math
import warnings
import zlib
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
from scipy import ndimage

from .data import (
    BACKGROUND,
    CONSOLIDATION,
    GGO,
    LUNG,
    CTImage,
    DataError,
    ManifestRow,
    PairedSample,
    SegMap,
    hu_window,
    lung_mask,
    save_image_png,
    save_map_png,
    write_manifest,
)

log = logging.getLogger(__name__)

SPLITS = ("train_synth", "test_synth", "test_seg")


@dataclass(frozen=True)
class Texture:
    level_hu: float
    noise_hu: float
    corr_len: float


DEFAULT_TEXTURES = {
    "air": Texture(-1000.0, 0.0, 1.0),
    "body": Texture(40.0, 25.0, 3.0),
    "bone": Texture(700.0, 60.0, 2.0),
    "lung": Texture(-640.0, 45.0, 2.0),
    "ggo": Texture(-350.0, 60.0, 1.5),
    "consolidation": Texture(40.0, 35.0, 2.5),
}


@dataclass(frozen=True)
class PhantomSpec:
    seed: int
    size: int = 64
    n_ggo_blobs: int = 2
    n_consolidation_blobs: int = 1
    texture_params: Mapping[str, Texture] = field(default_factory=lambda: dict(DEFAULT_TEXTURES))
    # slices of one patient share lung geometry when this is set
    patient_seed: int | None = None


@dataclass(frozen=True)
class AugmentConfig:
    resize_crop: tuple[float, float] = (1.0, 1.25)
    rotation: tuple[float, float] = (-15.0, 15.0)
    noise_sigma: float = 0.01
    elastic_alpha: float = 2.0
    elastic_sigma: float = 6.0
    use_resize_crop: bool = True
    use_rotation: bool = True
    use_noise: bool = True
    use_elastic: bool = True
    seed: int = 0

    def disabled(self) -> "AugmentConfig":
        return replace(self, use_resize_crop=False, use_rotation=False, use_noise=False, use_elastic=False)


def sample_rng(global_seed: int, sample_id: str, epoch: int = 0) -> np.random.Generator:
    """Per-sample generator derived from (global_seed, sample_id, epoch) only."""
    key = zlib.crc32(sample_id.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(global_seed), key, int(epoch)]))


def correlated_noise(rng: np.random.Generator, shape, corr_len: float) -> np.ndarray:
    """Unit-variance Gaussian noise smoothed with a Gaussian kernel of width corr_len."""
    white = rng.standard_normal(shape)
    if corr_len <= 0:
        return white
    smooth = ndimage.gaussian_filter(white, corr_len, mode="reflect")
    sd = smooth.std()
    return smooth / sd if sd > 0 else smooth


def _ellipse(shape, cy, cx, ry, rx, angle=0.0) -> np.ndarray:
    yy, xx = np.mgrid[: shape[0], : shape[1]].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(angle), math.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _place_blobs(rng, labels, n, cls, r_range, size) -> int:
    """Stamp up to n elliptical blobs of class cls inside the lung fields; returns count placed."""
    placed = 0
    for _ in range(n):
        for _attempt in range(20):
            free = np.argwhere(labels == LUNG)
            if len(free) == 0:
                break
            cy, cx = free[rng.integers(len(free))]
            ry = rng.uniform(*r_range) * size
            rx = rng.uniform(*r_range) * size
            blob = _ellipse(labels.shape, cy, cx, ry, rx, rng.uniform(0, math.pi)) & (labels != BACKGROUND)
            if blob.sum() >= 4:
                labels[blob] = cls
                placed += 1
                break
    return placed


def make_phantom(spec: PhantomSpec, sample_id: str | None = None, patient_tag: str = "") -> PairedSample:
    """Draw one paired (SegMap, CTImage) phantom slice. Same spec gives bitwise-identical output."""
    size = spec.size
    if size < 32:
        raise DataError(f"phantom size must be >= 32, got {size}")
    rng = np.random.default_rng(spec.seed)
    geo = np.random.default_rng(spec.patient_seed) if spec.patient_seed is not None else rng
    shape = (size, size)
    tex = {**DEFAULT_TEXTURES, **dict(spec.texture_params)}

    body = _ellipse(shape, size * 0.5, size * 0.5, size * geo.uniform(0.36, 0.40), size * geo.uniform(0.44, 0.47))
    spine = _ellipse(shape, size * 0.80, size * 0.5, size * 0.05, size * 0.05)
    labels = np.zeros(shape, dtype=np.uint8)
    lung_ry = size * geo.uniform(0.20, 0.25)
    lung_rx = size * geo.uniform(0.12, 0.15)
    gap = size * geo.uniform(0.17, 0.20)
    tilt = geo.uniform(-0.15, 0.15)
    for side in (-1, 1):
        field_ = _ellipse(shape, size * 0.47, size * 0.5 + side * gap, lung_ry, lung_rx, side * tilt)
        labels[field_ & body & ~spine] = LUNG

    want_g, want_c = spec.n_ggo_blobs, spec.n_consolidation_blobs
    got_g = _place_blobs(rng, labels, want_g, GGO, (0.04, 0.09), size)
    got_c = _place_blobs(rng, labels, want_c, CONSOLIDATION, (0.025, 0.06), size)
    if (got_g, got_c) != (want_g, want_c):
        msg = f"phantom seed {spec.seed}: placed {got_g}/{want_g} GGO and {got_c}/{want_c} consolidation blobs"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        log.warning(msg)

    hu = np.empty(shape, dtype=np.float64)
    regions = [
        ("air", ~body),
        ("body", body & (labels == BACKGROUND) & ~spine),
        ("bone", spine),
        ("lung", labels == LUNG),
        ("ggo", labels == GGO),
        ("consolidation", labels == CONSOLIDATION),
    ]
    for name, region in regions:
        t = tex[name]
        noise = correlated_noise(rng, shape, t.corr_len) if t.noise_hu > 0 else 0.0
        hu[region] = (t.level_hu + t.noise_hu * noise)[region] if t.noise_hu > 0 else t.level_hu
    sid = sample_id if sample_id is not None else f"phantom-{spec.seed}"
    return PairedSample(SegMap(labels), hu_window(hu), sid, patient_tag)


# -- augmentation -------------------------------------------------------------


def sample_geometry(cfg: AugmentConfig, rng: np.random.Generator, shape) -> np.ndarray | None:
    """Source coordinates (2, H, W) for one random geometric transform, or None for identity."""
    if not (cfg.use_resize_crop or cfg.use_rotation or cfg.use_elastic):
        return None
    h, w = shape
    yy, xx = np.mgrid[:h, :w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dy, dx = yy - cy, xx - cx
    scale, oy, ox = 1.0, 0.0, 0.0
    if cfg.use_resize_crop:
        scale = rng.uniform(*cfg.resize_crop)
        slack_y = h * (1.0 - 1.0 / scale) / 2.0
        slack_x = w * (1.0 - 1.0 / scale) / 2.0
        oy, ox = rng.uniform(-slack_y, slack_y), rng.uniform(-slack_x, slack_x)
    theta = math.radians(rng.uniform(*cfg.rotation)) if cfg.use_rotation else 0.0
    c, s = math.cos(theta), math.sin(theta)
    src_y = (c * dy - s * dx) / scale + cy + oy
    src_x = (s * dy + c * dx) / scale + cx + ox
    if cfg.use_elastic:
        for grid in (src_y, src_x):
            disp = ndimage.gaussian_filter(rng.uniform(-1, 1, shape), cfg.elastic_sigma)
            peak = np.abs(disp).max()
            if peak > 0:
                grid += cfg.elastic_alpha * disp / peak
    return np.stack([src_y, src_x])


def rotation_geometry(shape, degrees: float) -> np.ndarray:
    cfg = AugmentConfig(rotation=(degrees, degrees), use_resize_crop=False, use_elastic=False, use_noise=False)
    return sample_geometry(cfg, np.random.default_rng(0), shape)


def warp(array: np.ndarray, coords: np.ndarray | None, order: int) -> np.ndarray:
    """Resample a 2-D array (or a stack of them) at coords; order 0 for labels, 1 for intensities."""
    if coords is None:
        return array
    if array.ndim == 3:
        return np.stack([warp(a, coords, order) for a in array])
    out = ndimage.map_coordinates(array, coords, order=order, mode="nearest")
    return out.astype(array.dtype)


def augment(sample: PairedSample, cfg: AugmentConfig, rng: np.random.Generator | None = None) -> PairedSample:
    """Apply one random transform to the pair: shared geometry, image-only noise."""
    if rng is None:
        rng = sample_rng(cfg.seed, sample.id)
    labels = sample.map.labels
    image = sample.image.intensities.astype(np.float64)
    had_lung = bool(lung_mask(sample.map).any())

    new_labels, new_image = labels, image
    for _ in range(10):
        coords = sample_geometry(cfg, rng, labels.shape)
        new_labels = warp(labels, coords, 0)
        new_image = warp(image, coords, 1)
        if not had_lung or (new_labels != BACKGROUND).any():
            break
    else:
        new_labels, new_image = labels, image

    if cfg.use_noise and cfg.noise_sigma > 0:
        new_image = np.clip(new_image + rng.normal(0.0, cfg.noise_sigma, new_image.shape), 0.0, 1.0)
    else:
        new_image = np.clip(new_image, 0.0, 1.0)
    return PairedSample(SegMap(new_labels), CTImage(new_image), sample.id, sample.patient_tag)


# -- dataset organisation ------------------------------------------------------


@dataclass(frozen=True)
class DataConfig:
    size: int = 64
    n_train: int = 32
    n_test_synth: int = 8
    n_test_seg: int = 8
    aug_multiplier: int = 1
    seed: int = 0
    ggo_blobs: tuple[int, int] = (1, 3)
    consolidation_blobs: tuple[int, int] = (0, 2)
    slices_per_patient: int = 4


@dataclass(frozen=True)
class ManifestEntry:
    """One row of an in-memory dataset manifest; materialised lazily."""

    id: str
    source_id: str
    split: str
    patient_tag: str
    phantom_seed: int
    patient_seed: int
    n_ggo: int
    n_cons: int
    aug_index: int


@dataclass
class DatasetManifest:
    splits: dict[str, list[ManifestEntry]]
    size: int
    augment: AugmentConfig
    seed: int

    def counts(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.splits.items()}

    def materialize(self, split: str) -> list[PairedSample]:
        return [materialize_entry(e, self.size, self.augment, self.seed) for e in self.splits[split]]


def materialize_entry(e: ManifestEntry, size: int, aug: AugmentConfig, seed: int) -> PairedSample:
    spec = PhantomSpec(seed=e.phantom_seed, size=size, n_ggo_blobs=e.n_ggo, n_consolidation_blobs=e.n_cons,
                       patient_seed=e.patient_seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        base = make_phantom(spec, sample_id=e.id, patient_tag=e.patient_tag)
    if e.aug_index == 0:
        return base
    return augment(base, aug, sample_rng(seed, e.id, e.aug_index))


def build_dataset(
    n_train: int,
    n_test_synth: int,
    n_test_seg: int,
    aug_multiplier: int | Mapping[str, int] = 1,
    seed: int = 0,
    *,
    size: int = 64,
    augment_cfg: AugmentConfig | None = None,
    ggo_blobs: tuple[int, int] = (1, 3),
    consolidation_blobs: tuple[int, int] = (0, 2),
    slices_per_patient: int = 4,
) -> DatasetManifest:
    """Three disjoint splits, each original repeated aug_multiplier times.

    Copy 0 of every original is the un-augmented slice; copies 1..k-1 are
    augmented. ``aug_multiplier`` may be a per-split mapping.
    """
    counts = {"train_synth": n_train, "test_synth": n_test_synth, "test_seg": n_test_seg}
    for k, v in counts.items():
        if v < 1:
            raise ValueError(f"{k} count must be >= 1, got {v}")
    if isinstance(aug_multiplier, Mapping):
        mult = {k: int(aug_multiplier.get(k, 1)) for k in SPLITS}
    else:
        mult = dict.fromkeys(SPLITS, int(aug_multiplier))
    if any(v < 1 for v in mult.values()):
        raise ValueError("aug_multiplier must be >= 1")

    root = np.random.SeedSequence(seed)
    splits: dict[str, list[ManifestEntry]] = {}
    for split_idx, split in enumerate(SPLITS):
        rng = np.random.default_rng(root.spawn(len(SPLITS))[split_idx])
        originals = []
        for i in range(counts[split]):
            pidx = i // slices_per_patient
            n_g = int(rng.integers(ggo_blobs[0], ggo_blobs[1] + 1))
            n_c = int(rng.integers(consolidation_blobs[0], consolidation_blobs[1] + 1))
            if n_g + n_c == 0:
                n_g = 1
            originals.append((f"{split}-{i:05d}", f"{split}-p{pidx:04d}", int(rng.integers(2**31)),
                              int(seed * 7919 + split_idx * 104729 + pidx), n_g, n_c))
        entries = []
        for sid, tag, pseed, patseed, n_g, n_c in originals:
            for a in range(mult[split]):
                eid = sid if a == 0 else f"{sid}-a{a:03d}"
                entries.append(ManifestEntry(eid, sid, split, tag, pseed, patseed, n_g, n_c, a))
        splits[split] = entries
    return DatasetManifest(splits, size, augment_cfg or AugmentConfig(seed=seed), seed)


def dataset_from_config(cfg: DataConfig, aug: AugmentConfig | None = None) -> DatasetManifest:
    return build_dataset(cfg.n_train, cfg.n_test_synth, cfg.n_test_seg, cfg.aug_multiplier, cfg.seed,
                         size=cfg.size, augment_cfg=aug, ggo_blobs=cfg.ggo_blobs,
                         consolidation_blobs=cfg.consolidation_blobs,
                         slices_per_patient=cfg.slices_per_patient)


def write_dataset(manifest: DatasetManifest, out_dir) -> dict[str, str]:
    """Write PNG pairs plus one manifest file per split; returns split -> manifest path."""
    from pathlib import Path

    out_dir = Path(out_dir)
    paths = {}
    for split, entries in manifest.splits.items():
        rows = []
        for e in entries:
            s = materialize_entry(e, manifest.size, manifest.augment, manifest.seed)
            mrel, irel = f"{split}/maps/{e.id}.png", f"{split}/images/{e.id}.png"
            save_map_png(s.map, out_dir / mrel)
            save_image_png(s.image, out_dir / irel)
            rows.append(ManifestRow(e.id, mrel, irel, e.patient_tag))
        mpath = out_dir / f"manifest_{split}.txt"
        write_manifest(rows, mpath)
        paths[split] = str(mpath)
    return paths
