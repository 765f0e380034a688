"""Configuration dataclasses and presets."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Any

import yaml

DECODER_MODES = ("full", "pred_only", "det_only", "mlp")
CAUSALITY_MODES = ("deformable", "dual_frame_off")
MODALITY_MODES = ("vision_language", "vision_only")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 64
    patch_size: int = 16
    dim: int = 192
    encoder_depth: int = 4
    encoder_heads: int = 3
    mlp_ratio: float = 4.0
    decoder_depth: int = 2
    decoder_heads: int = 4
    deform_heads: int = 4
    deform_points: int = 4
    causality_depth: int = 1
    temperature: float = 0.07
    lambdas: tuple[float, float, float] = (1.0, 1.0, 1.0)
    max_text_len: int = 20
    text_dim: int | None = None
    vocab_seed: int = 0

    def __post_init__(self):
        self.lambdas = tuple(float(x) for x in self.lambdas)
        self.validate()

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def lang_dim(self) -> int:
        return self.text_dim or self.dim

    def validate(self):
        if self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size={self.image_size} not divisible by patch_size={self.patch_size}")
        for name in ("encoder_heads", "decoder_heads", "deform_heads"):
            heads = getattr(self, name)
            if heads <= 0 or self.dim % heads:
                raise ConfigError(f"dim={self.dim} not divisible by {name}={heads}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if len(self.lambdas) != 3 or any(x < 0 for x in self.lambdas):
            raise ConfigError(f"lambdas must be three non-negative weights, got {self.lambdas}")
        if self.max_text_len < 1:
            raise ConfigError("max_text_len must be >= 1")
        if self.deform_points < 1 or self.causality_depth < 1:
            raise ConfigError("deform_points and causality_depth must be >= 1")

    @classmethod
    def minimal(cls, **kw) -> "ModelConfig":
        base = dict(image_size=32, patch_size=16, dim=16, encoder_depth=1, encoder_heads=2,
                    decoder_depth=1, decoder_heads=2, deform_heads=2, deform_points=4,
                    max_text_len=6)
        base.update(kw)
        return cls(**base)

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def small(cls, **kw) -> "ModelConfig":
        base = dict(image_size=224, patch_size=16, dim=384, encoder_depth=12, encoder_heads=6,
                    decoder_depth=2, decoder_heads=4)
        base.update(kw)
        return cls(**base)


@dataclass
class DataConfig:
    p: float = 0.5
    image_size: int = 64
    seed: int = 0
    manifest_path: str | None = None
    num_synthetic: int = 512

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"p must lie in [0, 1], got {self.p}")
        if self.image_size <= 0:
            raise ConfigError("image_size must be positive")


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optimizer: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    epochs: int = 20
    batch_size: int = 16
    warmup_fraction: float = 0.05
    seed: int = 0
    decoder_mode: str = "full"
    causality: str = "deformable"
    modality: str = "vision_language"
    checkpoint_every: int = 0
    max_steps: int | None = None
    dtype: str = "float32"

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.optimizer != "adamw":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.decoder_mode not in DECODER_MODES:
            raise ConfigError(f"decoder_mode must be one of {DECODER_MODES}")
        if self.causality not in CAUSALITY_MODES:
            raise ConfigError(f"causality must be one of {CAUSALITY_MODES}")
        if self.modality not in MODALITY_MODES:
            raise ConfigError(f"modality must be one of {MODALITY_MODES}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.data.image_size != self.model.image_size:
            raise ConfigError(
                f"data.image_size={self.data.image_size} != model.image_size={self.model.image_size}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "TrainConfig":
        raw = dict(raw)
        model = _build(ModelConfig, raw.pop("model", {}) or {}, "model")
        data = _build(DataConfig, raw.pop("data", {}) or {}, "data")
        return _build(cls, dict(raw, model=model, data=data), "train")


def _build(klass, raw: dict, section: str):
    names = {f.name for f in dataclasses.fields(klass)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    try:
        return klass(**raw)
    except TypeError as exc:
        raise ConfigError(f"invalid {section} section: {exc}") from exc


def load_train_config(path: str | Path) -> TrainConfig:
    """Read a YAML or JSON training config."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return TrainConfig.from_dict(raw)
