"""Model, training and phantom configuration.

Config files are UTF-8 text with one ``section.key = value`` entry per line.
Sections are ``model``, ``train`` and ``data``; ``#`` starts a comment.
Tuple values are comma separated and the contrast table uses ``;`` between
modality rows::

    # tiny desk run
    model.extent = 32
    model.channels = 8,16,32,64,128
    model.token_dim = 128
    train.epochs = 20
    data.noise_std = 0.03
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .modality import MODALITY_NAMES


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; ``len(channels)`` is the stage count."""

    extent: int = 32
    channels: tuple[int, ...] = (16, 32, 64, 128, 256)
    token_dim: int = 256
    heads: int = 8
    ffn_mult: int = 4
    intra_depth: int = 1
    inter_depth: int = 1
    groups: int = 8
    num_classes: int = 3
    norm_eps: float = 1e-5
    use_intra: bool = True
    use_inter: bool = True
    use_aux: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.stages < 2:
            raise ConfigError("need at least two encoder stages")
        for c in self.channels:
            if c % self.groups:
                raise ConfigError(f"channel width {c} is not divisible by {self.groups} groups")
        if self.token_dim % self.heads:
            raise ConfigError(f"token_dim {self.token_dim} is not divisible by {self.heads} heads")
        if self.extent % self.downsample:
            raise ConfigError(f"extent {self.extent} is not divisible by {self.downsample}")
        if min(self.intra_depth, self.inter_depth) < 0 or self.ffn_mult < 1 or self.num_classes < 1:
            raise ConfigError("depths must be >= 0, ffn_mult and num_classes >= 1")

    @property
    def stages(self) -> int:
        return len(self.channels)

    @property
    def downsample(self) -> int:
        return 2 ** (self.stages - 1)

    @property
    def bottleneck_extent(self) -> int:
        return self.extent // self.downsample

    @property
    def tokens_per_modality(self) -> int:
        return self.bottleneck_extent ** 3

    def with_variant(self, variant: str) -> "ModelConfig":
        flags = VARIANTS[variant]
        return dataclasses.replace(self, **flags)

    def variant_name(self) -> str:
        for name, flags in VARIANTS.items():
            if all(getattr(self, k) == v for k, v in flags.items()):
                return name
        return "custom"


VARIANTS: dict[str, dict[str, bool]] = {
    "full": dict(use_intra=True, use_inter=True, use_aux=True),
    "no-intra": dict(use_intra=False, use_inter=True, use_aux=True),
    "no-inter": dict(use_intra=True, use_inter=False, use_aux=True),
    "no-aux": dict(use_intra=True, use_inter=True, use_aux=False),
}

VARIANT_LABELS: dict[str, str] = {
    "full": "mmFormer",
    "no-intra": "w/o IntraTrans",
    "no-inter": "w/o InterTrans",
    "no-aux": "w/o Aux. Reg.",
}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 1
    steps_per_epoch: Optional[int] = None
    batch_size: int = 1
    mask_policy: str = "uniform"
    dropout_p: float = 0.5
    seed: int = 0
    checkpoint_every: int = 0
    lr_schedule: str = "constant"
    poly_power: float = 0.9
    grad_clip: Optional[float] = None
    augment: bool = True
    crop_extent: Optional[int] = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.eps <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("eps must be positive, epochs and batch_size >= 1")
        if self.mask_policy not in ("uniform", "bernoulli", "full"):
            raise ConfigError(f"unknown mask policy {self.mask_policy!r}")
        if self.lr_schedule not in ("constant", "poly"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError("dropout_p must lie in [0, 1)")


# Intensities per modality row for (tissue, edema, non-enhancing core, enhancing).
DEFAULT_CONTRAST: tuple[tuple[float, ...], ...] = (
    (0.50, 1.00, 0.85, 0.80),  # FLAIR: whole tumor bright
    (0.50, 0.50, 0.25, 1.20),  # T1c: enhancing rim bright, necrotic core dark
    (0.50, 0.42, 0.36, 0.46),  # T1: weak contrast
    (0.50, 1.05, 0.75, 0.75),  # T2: whole tumor bright, core darker than edema
)


@dataclass(frozen=True)
class PhantomConfig:
    """Synthetic volume parameters; radii are fractions of the extent."""

    extent: int = 32
    tumor_count: tuple[int, int] = (1, 2)
    wt_radius: tuple[float, float] = (0.16, 0.26)
    tc_radius: tuple[float, float] = (0.09, 0.14)
    et_radius: tuple[float, float] = (0.04, 0.08)
    anisotropy: float = 0.2
    contrast: tuple[tuple[float, ...], ...] = DEFAULT_CONTRAST
    texture_std: float = 0.05
    texture_sigma: float = 2.0
    noise_std: float = 0.03

    def __post_init__(self):
        object.__setattr__(self, "contrast", tuple(tuple(float(v) for v in row) for row in self.contrast))
        if self.extent % 16:
            raise ConfigError("phantom extent must be divisible by 16")
        lo, hi = self.tumor_count
        if not 1 <= lo <= hi:
            raise ConfigError("tumor_count must satisfy 1 <= min <= max")
        for name in ("wt_radius", "tc_radius", "et_radius"):
            a, b = getattr(self, name)
            if not 0 < a <= b:
                raise ConfigError(f"{name} must satisfy 0 < min <= max")
        if not (self.et_radius[1] < self.tc_radius[0] and self.tc_radius[1] < self.wt_radius[0]):
            raise ConfigError("radius ranges must nest: et < tc < wt")
        if len(self.contrast) != len(MODALITY_NAMES) or any(len(r) != 4 for r in self.contrast):
            raise ConfigError("contrast table needs 4 rows of 4 intensities")
        if self.noise_std < 0 or self.texture_std < 0 or not 0 <= self.anisotropy < 1:
            raise ConfigError("noise/texture std must be >= 0 and anisotropy in [0, 1)")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: PhantomConfig = field(default_factory=PhantomConfig)


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": PhantomConfig}


def _parse_value(raw: str, annotation):
    raw = raw.strip()
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if origin is typing.Union:  # Optional[...]
        if raw.lower() in ("", "none"):
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _parse_value(raw, inner)
    if annotation is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if annotation in (int, float, str):
        return annotation(raw)
    if origin is tuple:
        if args and typing.get_origin(args[0]) is tuple:
            return tuple(_parse_value(row, args[0]) for row in raw.split(";") if row.strip())
        elem = args[0]
        return tuple(elem(v.strip()) for v in raw.split(",") if v.strip())
    raise ConfigError(f"unsupported field type {annotation!r}")


def _format_value(value) -> str:
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return "; ".join(_format_value(v) for v in value)
        return ",".join(str(v) for v in value)
    return str(value)


def parse_config_text(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    base = base or RunConfig()
    updates: dict[str, dict] = {name: {} for name in _SECTIONS}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in _SECTIONS:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        hints = typing.get_type_hints(_SECTIONS[section])
        if name not in hints:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            updates[section][name] = _parse_value(value, hints[name])
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from exc
    return RunConfig(
        model=dataclasses.replace(base.model, **updates["model"]),
        train=dataclasses.replace(base.train, **updates["train"]),
        data=dataclasses.replace(base.data, **updates["data"]),
    )


def load_config(path) -> RunConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def format_config(cfg: RunConfig) -> str:
    lines = []
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(format_config(cfg), encoding="utf-8")


def config_to_dict(obj) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(obj)))


def model_config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def train_config_from_dict(d: dict) -> TrainConfig:
    return TrainConfig(**d)


def config_hash(cfg: ModelConfig) -> str:
    """Stable digest of the architecture; checkpoints refuse a different one."""
    payload = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()[:16]
