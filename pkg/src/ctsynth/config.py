"""Run configuration: nested dataclasses loaded from / written to TOML."""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

import tomli
import tomli_w

from .discriminator import DiscriminatorConfig
from .generator import GeneratorConfig
from .phantom import AugmentConfig, DataConfig


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""


@dataclass(frozen=True)
class TrainConfig:
    epochs_total: int = 20
    stage_epochs: tuple[int, int, int] = (5, 5, 10)
    lr: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    lambda_fm: float = 10.0
    batch_size: int = 16
    steps_per_epoch: int | None = None
    seed: int = 0
    saturating_g_loss: bool = False
    deterministic: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if len(self.stage_epochs) != 3:
            raise ValueError("stage_epochs must have three entries")
        if any(e < 0 for e in self.stage_epochs):
            raise ValueError("stage_epochs must be non-negative")
        if sum(self.stage_epochs) != self.epochs_total:
            raise ValueError(f"stage_epochs {tuple(self.stage_epochs)} must sum to epochs_total {self.epochs_total}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.lambda_fm < 0:
            raise ValueError("lambda_fm must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1")


@dataclass(frozen=True)
class SegConfig:
    base_channels: int = 32
    depth: int = 4
    steps: int = 300
    batch_size: int = 8
    lr: float = 2e-4
    modes: tuple[str, ...] = ("replace", "add")
    ratios: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
    seeds: tuple[int, ...] = (1,)
    n_folds: int = 10
    # "train_synth" evaluates on the synthesis training split, "test_seg" on the held-out seg split
    eval_split: str = "train_synth"
    synth_multiplier: int = 1

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        for m in self.modes:
            if m not in ("replace", "add"):
                raise ValueError(f"unknown mode {m!r}")
        if self.eval_split not in ("train_synth", "test_seg"):
            raise ValueError("eval_split must be train_synth or test_seg")


@dataclass(frozen=True)
class EvalConfig:
    n_folds: int = 10
    extractor: str = "random_conv"
    embed_dim: int = 64
    psnr_cap: float = 100.0


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    generator: GeneratorConfig = field(default_factory=lambda: GeneratorConfig(base_resolution=DataConfig().size))
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seg: SegConfig = field(default_factory=SegConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.generator.base_resolution != self.data.size:
            raise ValueError(
                f"generator.base_resolution ({self.generator.base_resolution}) must equal data.size ({self.data.size})"
            )
        if self.discriminator.beta_source == "d2" and self.discriminator.n_discriminators < 2:
            raise ValueError("discriminator.beta_source = 'd2' needs n_discriminators >= 2")


def to_dict(obj) -> dict:
    """Dataclass to a TOML-friendly dict (tuples become lists, None fields are dropped)."""
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if v is None:
            continue
        if is_dataclass(v):
            v = to_dict(v)
        elif isinstance(v, tuple):
            v = list(v)
        elif isinstance(v, dict):
            v = {k: (to_dict(x) if is_dataclass(x) else x) for k, x in v.items()}
        out[f.name] = v
    return out


def _coerce(value, tp, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{path}: expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data: dict, path: str = ""):
    """Build dataclass ``cls`` from a dict, reporting the dotted path of any bad field."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected a table")
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        fpath = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f"{fpath}: unknown field")
        tp = hints[key]
        if is_dataclass(tp):
            kwargs[key] = from_dict(tp, value, fpath)
        elif key == "texture_params":
            kwargs[key] = value
        else:
            kwargs[key] = _coerce(value, tp, fpath)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from exc


def _deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_override(text: str) -> dict:
    """``section.key=value`` (value in TOML syntax) to a nested dict."""
    if "=" not in text:
        raise ConfigError(f"{text}: override must look like section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        value = raw
    node: dict = {}
    cur = node
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value
    return node


def load_config(path=None, overrides=()) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            data = tomli.loads(Path(path).read_text())
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"<file>: {exc}") from exc
    for o in overrides:
        data = _deep_merge(data, parse_override(o))
    return from_dict(RunConfig, data)


def dump_config(cfg, path=None) -> str:
    text = tomli_w.dumps(to_dict(cfg))
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    return text


def replace_section(cfg: RunConfig, section: str, **changes) -> RunConfig:
    return dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **changes)})
