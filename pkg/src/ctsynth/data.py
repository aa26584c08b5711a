"""Domain types, HU windowing, label encoding and resolution halving.

Everything here is a pure function over numpy arrays. Torch counterparts of
the two resampling helpers live at the bottom of the module so the networks
can halve batches without a round trip through numpy.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

HU_MIN = -600.0
HU_MAX = 1500.0

N_CLASSES = 4
BACKGROUND, LUNG, GGO, CONSOLIDATION = range(N_CLASSES)
CLASS_NAMES = ("background", "lung", "ggo", "consolidation")


class DataError(ValueError):
    """Raised for malformed sample data (bad labels, NaNs, mismatched dims)."""


class ShapeError(ValueError):
    """Raised when an array does not have the dims an operation requires."""


@dataclass(frozen=True, eq=False)
class SegMap:
    """Per-pixel class map with ids in {0: background, 1: lung, 2: GGO, 3: consolidation}."""

    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ShapeError(f"SegMap must be 2-D, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(np.mod(labels, 1) == 0):
                raise DataError("SegMap labels must be integers")
        if labels.size and (labels.min() < 0 or labels.max() >= N_CLASSES):
            raise DataError(f"SegMap labels must lie in [0, {N_CLASSES - 1}]")
        object.__setattr__(self, "labels", labels.astype(np.uint8))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def __eq__(self, other):
        return isinstance(other, SegMap) and np.array_equal(self.labels, other.labels)


@dataclass(frozen=True, eq=False)
class CTImage:
    """Single-channel intensity image with values in [0, 1]."""

    intensities: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.intensities, dtype=np.float32)
        if x.ndim != 2:
            raise ShapeError(f"CTImage must be 2-D, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise DataError("CTImage contains non-finite values")
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise DataError("CTImage intensities must lie in [0, 1]")
        object.__setattr__(self, "intensities", x)

    @property
    def height(self) -> int:
        return self.intensities.shape[0]

    @property
    def width(self) -> int:
        return self.intensities.shape[1]

    def __eq__(self, other):
        return isinstance(other, CTImage) and np.array_equal(self.intensities, other.intensities)


@dataclass(frozen=True, eq=False)
class OneHotMap:
    """Four indicator planes, shape (4, H, W), summing to one at every pixel."""

    channels: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.channels, dtype=np.float32)
        if c.ndim != 3 or c.shape[0] != N_CLASSES:
            raise ShapeError(f"OneHotMap must have shape (4, H, W), got {c.shape}")
        if not np.all((c == 0) | (c == 1)) or not np.all(c.sum(axis=0) == 1):
            raise DataError("OneHotMap channels must be 0/1 with exactly one active class per pixel")
        object.__setattr__(self, "channels", c)

    @property
    def height(self) -> int:
        return self.channels.shape[1]

    @property
    def width(self) -> int:
        return self.channels.shape[2]

    def argmax(self) -> SegMap:
        return SegMap(np.argmax(self.channels, axis=0))

    def __eq__(self, other):
        return isinstance(other, OneHotMap) and np.array_equal(self.channels, other.channels)


@dataclass(frozen=True)
class PairedSample:
    map: SegMap
    image: CTImage
    id: str
    patient_tag: str = ""

    def __post_init__(self):
        if self.map.labels.shape != self.image.intensities.shape:
            raise ShapeError(
                f"map {self.map.labels.shape} and image {self.image.intensities.shape} differ in size"
            )


def hu_window(raw, lo: float = HU_MIN, hi: float = HU_MAX) -> CTImage:
    """Map raw Hounsfield units onto [0, 1] through the [lo, hi] window, clamping outside it."""
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise DataError("HU input contains non-finite values")
    scaled = (raw - lo) / (hi - lo)
    return CTImage(np.clip(scaled, 0.0, 1.0))


def inverse_hu_window(image: CTImage, lo: float = HU_MIN, hi: float = HU_MAX) -> np.ndarray:
    return image.intensities.astype(np.float64) * (hi - lo) + lo


def encode_onehot(seg: SegMap) -> OneHotMap:
    labels = seg.labels
    channels = (labels[None, :, :] == np.arange(N_CLASSES)[:, None, None]).astype(np.float32)
    return OneHotMap(channels)


def lung_mask(seg: SegMap) -> np.ndarray:
    """Binary uint8 mask, 1 on lung, GGO and consolidation pixels."""
    return (seg.labels != BACKGROUND).astype(np.uint8)


def infection_mask(seg: SegMap) -> np.ndarray:
    return ((seg.labels == GGO) | (seg.labels == CONSOLIDATION)).astype(np.uint8)


def _pool2(a: np.ndarray) -> np.ndarray:
    h, w = a.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"half_resolution needs even dims, got {h}x{w}")
    blocks = a.reshape(*a.shape[:-2], h // 2, 2, w // 2, 2)
    return blocks.mean(axis=(-3, -1))


def half_resolution(x):
    """Halve width and height.

    Intensity images are 2x2 average pooled. One-hot maps are average pooled
    and then snapped back to one-hot by argmax, so each output pixel takes the
    majority class of its block (ties resolve to the lower class id).
    """
    if isinstance(x, CTImage):
        return CTImage(_pool2(x.intensities.astype(np.float64)))
    if isinstance(x, OneHotMap):
        pooled = _pool2(x.channels.astype(np.float64))
        return encode_onehot(SegMap(np.argmax(pooled, axis=0)))
    if isinstance(x, SegMap):
        return half_resolution(encode_onehot(x)).argmax()
    raise TypeError(f"half_resolution does not accept {type(x).__name__}")


def resize_square(raw: np.ndarray, size: int, method: str = "bilinear") -> np.ndarray:
    """Resize a 2-D array to size x size; labels should use method='nearest'."""
    modes = {"bilinear": Image.BILINEAR, "nearest": Image.NEAREST, "bicubic": Image.BICUBIC}
    if method not in modes:
        raise ValueError(f"unknown interpolation {method!r}")
    img = Image.fromarray(np.asarray(raw, dtype=np.float32), mode="F")
    return np.asarray(img.resize((size, size), modes[method]), dtype=np.float32)


# -- torch helpers -----------------------------------------------------------


def half_image_t(x: torch.Tensor) -> torch.Tensor:
    return F.avg_pool2d(x, 2)


def half_onehot_t(m: torch.Tensor) -> torch.Tensor:
    pooled = F.avg_pool2d(m, 2)
    idx = pooled.argmax(dim=1)
    return F.one_hot(idx, m.shape[1]).permute(0, 3, 1, 2).to(m.dtype)


def samples_to_tensors(samples) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack samples into (maps (N,4,H,W), images (N,1,H,W)) float32 tensors."""
    maps = np.stack([encode_onehot(s.map).channels for s in samples])
    images = np.stack([s.image.intensities for s in samples])[:, None]
    return torch.from_numpy(maps), torch.from_numpy(images.astype(np.float32))


# -- PNG and manifest I/O ----------------------------------------------------


def save_image_png(image: CTImage, path, bits: int = 16) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if bits == 16:
        q = np.round(image.intensities.astype(np.float64) * 65535).astype(np.uint16)
        Image.fromarray(q).save(path)
    elif bits == 8:
        q = np.round(image.intensities.astype(np.float64) * 255).astype(np.uint8)
        Image.fromarray(q, mode="L").save(path)
    else:
        raise ValueError("bits must be 8 or 16")


def load_image_png(path) -> CTImage:
    arr = np.asarray(Image.open(path))
    if arr.ndim == 3:
        arr = arr[..., 0]
    if arr.dtype == np.uint8:
        return CTImage(arr.astype(np.float64) / 255.0)
    # PIL reads 16-bit grayscale as uint16 or int32 depending on version
    return CTImage(arr.astype(np.float64) / 65535.0)


def save_map_png(seg: SegMap, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(seg.labels, mode="L").save(path)


def load_map_png(path) -> SegMap:
    img = Image.open(path)
    if img.mode == "P":
        arr = np.asarray(img)
    else:
        arr = np.asarray(img.convert("L"))
    return SegMap(arr)


@dataclass(frozen=True)
class ManifestRow:
    id: str
    map_path: str
    image_path: str
    patient_tag: str


def write_manifest(rows, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for r in rows:
            fh.write(f"{r.id}, {r.map_path}, {r.image_path}, {r.patient_tag}\n")


def read_manifest(path) -> list[ManifestRow]:
    rows = []
    with open(path, newline="") as fh:
        for lineno, fields in enumerate(csv.reader(fh, skipinitialspace=True), 1):
            if not fields or fields[0].startswith("#"):
                continue
            if len(fields) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(fields)}")
            rows.append(ManifestRow(*(f.strip() for f in fields)))
    return rows


def load_manifest_samples(path) -> list[PairedSample]:
    """Load every pair a manifest lists; relative paths resolve against the manifest's dir."""
    base = Path(path).parent
    out = []
    for r in read_manifest(path):
        mp, ip = Path(r.map_path), Path(r.image_path)
        mp = mp if mp.is_absolute() else base / mp
        ip = ip if ip.is_absolute() else base / ip
        out.append(PairedSample(load_map_png(mp), load_image_png(ip), r.id, r.patient_tag))
    return out
