"""Validated configuration records and named presets.

A run is described by three sections, ``[model]``, ``[train]`` and ``[data]``,
loadable from TOML.  Every field is validated on construction and errors
name the offending field as ``section.field``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from .geometry import RotationRepr


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


OUTPUT_MODES = ("direct", "residual")
HYPERNET_ARCHS = ("transformer", "backbone_embedding")
PE_MODES = ("input", "qk")
FINETUNE_SCOPES = ("branch", "heads")
PREPROCESS = ("none", "posenet")


@dataclass
class ModelConfig:
    input_size: int = 224
    stem_channels: int = 16
    # Widths at reductions 1..4 (/2, /4, /8, /16).  Taps: orientation at 3, position at 4.
    stage_channels: tuple[int, ...] = (16, 24, 40, 112)
    convs_per_stage: int = 1
    terminal_channels: int = 1280
    main_dim: int = 256
    hyper_dim: int = 512
    encoder_layers: int = 6
    heads: int = 4
    dropout: float = 0.1
    pe_mode: str = "input"
    position_head: tuple[int, ...] = (512, 256, 3)
    orientation_head: tuple[int, ...] = (512, 512, 4)
    rotation_repr: str = "quaternion"
    output_mode: str = "residual"
    hypernet_arch: str = "transformer"
    regressed_layers: int = 3
    generate_bias: bool = True
    generator_hidden: int = 0  # 0 -> hyper_dim
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.position_head = tuple(int(c) for c in self.position_head)
        self.orientation_head = tuple(int(c) for c in self.orientation_head)
        try:
            repr_ = RotationRepr.parse(self.rotation_repr)
        except ValueError:
            raise ConfigError("model.rotation_repr", f"unknown rotation representation {self.rotation_repr!r}; "
                              f"expected one of {[r.value for r in RotationRepr]}") from None
        self.rotation_repr = repr_.value
        # The orientation head's last width always follows the representation.
        self.orientation_head = self.orientation_head[:-1] + (repr_.width,)
        _positive("model", self, "input_size", "stem_channels", "terminal_channels", "main_dim", "hyper_dim",
                  "encoder_layers", "heads", "convs_per_stage")
        if len(self.stage_channels) != 4 or min(self.stage_channels) < 1:
            raise ConfigError("model.stage_channels", "need four positive widths (reductions 1..4)")
        for name in ("main_dim", "hyper_dim"):
            if getattr(self, name) % self.heads:
                raise ConfigError(f"model.{name}", f"must be divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("model.dropout", "must lie in [0, 1)")
        _choice("model.pe_mode", self.pe_mode, PE_MODES)
        _choice("model.output_mode", self.output_mode, OUTPUT_MODES)
        _choice("model.hypernet_arch", self.hypernet_arch, HYPERNET_ARCHS)
        for name, dim in (("position_head", 3), ("orientation_head", repr_.width)):
            widths = getattr(self, name)
            if not 1 <= len(widths) <= 3 or min(widths) < 1:
                raise ConfigError(f"model.{name}", "need 1 to 3 positive layer widths")
            if widths[-1] != dim:
                raise ConfigError(f"model.{name}", f"last width must be {dim}")
        if self.regressed_layers not in (1, 2, 3):
            raise ConfigError("model.regressed_layers", "must be 1, 2 or 3")
        if self.generator_hidden < 0:
            raise ConfigError("model.generator_hidden", "must be >= 0")
        if self.input_size < 16:
            raise ConfigError("model.input_size", "must be at least 16 (four stride-2 reductions)")

    @property
    def repr(self) -> RotationRepr:
        return RotationRepr.parse(self.rotation_repr)


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-10
    weight_decay: float = 1e-4
    decoupled_weight_decay: bool = False
    lr_decay_factor: float = 0.75
    lr_decay_every: int = 100
    max_epochs: int = 300
    finetune_epochs: int = 100
    finetune_scope: str = "branch"
    s_x_init: float = 0.0
    s_q_init: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        _positive("train", self, "batch_size", "lr", "eps", "lr_decay_every", "max_epochs")
        if self.finetune_epochs < 0:
            raise ConfigError("train.finetune_epochs", "must be >= 0")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay", "must be >= 0")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError("train.betas", "need two values in [0, 1)")
        if not 0.0 < self.lr_decay_factor < 1.0:
            raise ConfigError("train.lr_decay_factor", "must lie in (0, 1)")
        _choice("train.finetune_scope", self.finetune_scope, FINETUNE_SCOPES)


@dataclass
class DataConfig:
    # "synthetic" or a dataset directory containing ``split_file``.
    source: str = "synthetic"
    split_file: str = "dataset_train.txt"
    synthetic_seed: int = 42
    synthetic_n: int = 200
    synthetic_blobs: int = 24
    preprocess: str = "none"
    resize_edge: int = 256
    jitter: float = 0.25

    def __post_init__(self):
        _positive("data", self, "synthetic_n", "synthetic_blobs", "resize_edge")
        _choice("data.preprocess", self.preprocess, PREPROCESS)
        if not 0.0 <= self.jitter < 1.0:
            raise ConfigError("data.jitter", "must lie in [0, 1)")


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, section: str, **changes) -> "Config":
        new = dataclasses.replace(getattr(self, section), **changes)
        return dataclasses.replace(self, **{section: new})


def _positive(section: str, obj, *names: str) -> None:
    for name in names:
        value = getattr(obj, name)
        if not isinstance(value, (int, float)) or isinstance(value, bool) or value <= 0:
            raise ConfigError(f"{section}.{name}", f"must be positive, got {value!r}")


def _choice(name: str, value, options) -> None:
    if value not in options:
        raise ConfigError(name, f"must be one of {list(options)}, got {value!r}")


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig}


def config_from_dict(raw: dict[str, Any], base: Config | None = None) -> Config:
    """Overlay ``raw`` (section -> {field: value}) onto ``base`` (defaults if None)."""
    base = base or Config()
    parts = {}
    for section, cls in _SECTIONS.items():
        current = dataclasses.asdict(getattr(base, section))
        values = raw.get(section, {}) or {}
        if not isinstance(values, dict):
            raise ConfigError(section, "must be a table")
        known = {f.name for f in dataclasses.fields(cls)}
        for key, val in values.items():
            if key not in known:
                raise ConfigError(f"{section}.{key}", "unknown field")
            current[key] = val
        try:
            parts[section] = cls(**current)
        except TypeError as exc:
            raise ConfigError(section, str(exc)) from None
    unknown = set(raw) - set(_SECTIONS) - {"preset"}
    if unknown:
        name = sorted(unknown)[0]
        raise ConfigError(name, "unknown section")
    return Config(**parts)


def load_config(path: str | Path) -> Config:
    """Read a TOML config.  An optional top-level ``preset = "<name>"`` selects the base."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("file", f"invalid TOML: {exc}") from None
    preset = raw.get("preset")
    base = get_preset(preset) if preset else None
    return config_from_dict(raw, base)


def dump_toml(cfg: Config) -> str:
    """Serialize a config to TOML text (flat sections, scalars and arrays only)."""
    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        for key, val in values.items():
            lines.append(f"{key} = {_toml_value(val)}")
        lines.append("")
    return "\n".join(lines)


def _toml_value(val) -> str:
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, (int, float)):
        return repr(val)
    if isinstance(val, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in val) + "]"
    return '"' + str(val).replace("\\", "\\\\").replace('"', '\\"') + '"'


# ---------------------------------------------------------------------------
# Presets


def full_model() -> ModelConfig:
    return ModelConfig()


def desk_model(**overrides) -> ModelConfig:
    """Every width shrunk so the full architecture trains on a laptop CPU.

    Shape relationships are kept: two taps at reductions 3 and 4, a hypernetwork
    latent twice the main latent, three-layer heads whose generated weights
    are produced per image.
    """
    base = dict(
        input_size=32,
        stem_channels=8,
        stage_channels=(16, 24, 32, 48),
        convs_per_stage=1,
        terminal_channels=96,
        main_dim=16,
        hyper_dim=32,
        encoder_layers=2,
        heads=4,
        dropout=0.0,
        position_head=(32, 16, 3),
        orientation_head=(32, 32, 4),
    )
    base.update(overrides)
    return ModelConfig(**base)


PRESETS = {
    "indoor": lambda: Config(
        model=full_model(),
        train=TrainConfig(lr_decay_every=100, max_epochs=300),
        data=DataConfig(source="", preprocess="posenet"),
    ),
    "outdoor": lambda: Config(
        model=full_model(),
        train=TrainConfig(lr_decay_every=200, max_epochs=1000, s_x_init=-3.0, s_q_init=-3.0),
        data=DataConfig(source="", preprocess="posenet"),
    ),
    "desk": lambda: Config(
        model=desk_model(),
        train=TrainConfig(batch_size=2, lr=5e-4, weight_decay=0.0, max_epochs=50, finetune_epochs=10,
                          lr_decay_every=100),
        data=DataConfig(source="synthetic", synthetic_seed=42, synthetic_n=200, preprocess="none"),
    ),
}


def get_preset(name: str) -> Config:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError("preset", f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None
