"""Portable checkpoint directories.

Layout::

    ckpt/
      checkpoint.toml          config + epoch + parameter/optimizer index
      params/<name>.bin        one file per named parameter
      optim/<opt>/<name>.<field>.bin
      rng.bin                  torch CPU generator state (raw bytes)

Each ``.bin`` holds a little-endian header (magic ``CTSF``, uint32 ndim,
uint32 dims...) followed by float32 little-endian data.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import tomli
import tomli_w
import torch

MAGIC = b"CTSF"


def write_array(path, arr) -> None:
    arr = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def read_array(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint array file")
    (ndim,) = struct.unpack_from("<I", data, 4)
    shape = struct.unpack_from(f"<{ndim}I", data, 8)
    offset = 8 + 4 * ndim
    arr = np.frombuffer(data, dtype="<f4", offset=offset)
    return arr.reshape(shape).astype(np.float32)


def _safe(name: str) -> str:
    return name.replace("/", "_")


def save_checkpoint(path, modules: dict[str, torch.nn.Module], optimizers: dict[str, torch.optim.Optimizer],
                    meta: dict) -> Path:
    """Write named modules, optimizer moments and ``meta`` (TOML-serialisable) to ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index: dict = {"params": {}, "optim": {}}
    for mname, module in modules.items():
        names = []
        for pname, p in module.state_dict().items():
            key = f"{mname}.{pname}"
            write_array(path / "params" / f"{_safe(key)}.bin", p.detach().cpu().numpy())
            names.append(pname)
        index["params"][mname] = names
    for oname, opt in optimizers.items():
        names = _param_names(opt, modules)
        entries = []
        for p, key in zip(_opt_params(opt), names):
            st = opt.state.get(p, {})
            for field in sorted(st):
                val = st[field]
                arr = val.detach().cpu().numpy() if torch.is_tensor(val) else np.asarray(val)
                write_array(path / "optim" / oname / f"{_safe(key)}.{field}.bin", arr)
                entries.append(f"{key}:{field}")
        index["optim"][oname] = entries
    (path / "rng.bin").write_bytes(torch.get_rng_state().numpy().tobytes())
    doc = {"meta": meta, "index": index}
    (path / "checkpoint.toml").write_text(tomli_w.dumps(doc))
    return path


def _opt_params(opt):
    for g in opt.param_groups:
        yield from g["params"]


def _param_names(opt, modules) -> list[str]:
    lookup = {}
    for mname, module in modules.items():
        for pname, p in module.named_parameters():
            lookup[id(p)] = f"{mname}.{pname}"
    return [lookup[id(p)] for p in _opt_params(opt)]


def load_meta(path) -> dict:
    return tomli.loads((Path(path) / "checkpoint.toml").read_text())["meta"]


def load_checkpoint(path, modules: dict[str, torch.nn.Module],
                    optimizers: dict[str, torch.optim.Optimizer] | None = None, restore_rng: bool = True) -> dict:
    """Load parameters (and optimizer state) in place; returns the stored meta."""
    path = Path(path)
    doc = tomli.loads((path / "checkpoint.toml").read_text())
    for mname, module in modules.items():
        state = {}
        for pname in doc["index"]["params"].get(mname, []):
            state[pname] = torch.from_numpy(read_array(path / "params" / f"{_safe(f'{mname}.{pname}')}.bin"))
        module.load_state_dict(state, strict=True)
    for oname, opt in (optimizers or {}).items():
        entries = doc["index"]["optim"].get(oname, [])
        by_key: dict[str, dict[str, torch.Tensor]] = {}
        for entry in entries:
            key, field = entry.rsplit(":", 1)
            arr = read_array(path / "optim" / oname / f"{_safe(key)}.{field}.bin")
            by_key.setdefault(key, {})[field] = torch.from_numpy(arr)
        names = _param_names(opt, modules)
        opt.state.clear()
        for p, key in zip(_opt_params(opt), names):
            if key in by_key:
                st = dict(by_key[key])
                if "step" in st:
                    st["step"] = st["step"].reshape(())
                opt.state[p] = st
    if restore_rng and (path / "rng.bin").exists():
        raw = np.frombuffer((path / "rng.bin").read_bytes(), dtype=np.uint8).copy()
        torch.set_rng_state(torch.from_numpy(raw))
    return doc["meta"]
