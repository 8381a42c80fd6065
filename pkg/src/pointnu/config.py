"""Flat key/value run configuration shared by the trainer and the CLI.

A config file is a YAML mapping of scalar keys. Every key has a default; unknown
keys are rejected. ``variant`` (``default`` | ``M`` | ``S``) is applied first
and explicit keys override it.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .augment import AugmentConfig
from .inference import InferenceConfig
from .model import ModelConfig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(message)
        self.key = key


@dataclass
class TrainConfig:
    epochs: int = 100
    base_lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 8
    lr_drops: tuple = (80, 90)
    lr_gamma: float = 0.1
    crop_size: int = 256
    seed: int = 0
    val_fraction: float = 0.1
    val_every: int = 1
    grad_clip: float = 10.0
    lambda_mask: float = 1.0
    tau: float = 0.5
    target_mode: str = "keypoint-heatmap"
    detector_loss: str = "focal"
    focal_alpha: float = 2.0
    focal_beta: float = 4.0

    def __post_init__(self):
        self.lr_drops = tuple(int(e) for e in self.lr_drops)
        if self.batch_size < 1:
            raise ConfigError("batch_size", "batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs", "epochs must be >= 1")
        if any(not 0 <= e < self.epochs for e in self.lr_drops):
            raise ConfigError("lr_drops", f"lr_drops {self.lr_drops} must lie within [0, {self.epochs})")
        if self.crop_size % 32:
            raise ConfigError("crop_size", f"crop_size {self.crop_size} must be a multiple of 32")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction", "val_fraction must lie in [0, 1)")
        if self.target_mode not in ("keypoint-heatmap", "centerpoint-map"):
            raise ConfigError("target_mode", f"unknown target_mode {self.target_mode!r}")
        if self.detector_loss not in ("focal", "bce"):
            raise ConfigError("detector_loss", f"unknown detector_loss {self.detector_loss!r}")

    def lr_at(self, epoch: int) -> float:
        """Step schedule: ``base_lr * lr_gamma ** (number of drops <= epoch)`` (epochs 0-based)."""
        return self.base_lr * self.lr_gamma ** sum(1 for d in self.lr_drops if epoch >= d)


VARIANTS = {
    "default": {"head_depth": 7},
    "M": {"head_depth": 4},
    "S": {"head_depth": 4, "jpfm_branch_channels": 64, "jpfm_out_channels": 128,
          "head_channels": 128, "feature_channels": 128},
}

_AUG_PREFIX = "aug_"
_AUG_KEYS = [f.name for f in fields(AugmentConfig) if f.name != "crop_size"]


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferenceConfig = field(default_factory=InferenceConfig)
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    match_radius: float = 12.0
    variant: str = "default"

    def augment_config(self) -> AugmentConfig:
        return dataclasses.replace(self.aug, crop_size=self.train.crop_size)

    def to_flat(self) -> dict:
        out = {"variant": self.variant, "match_radius": self.match_radius}
        for sect in (self.model, self.train, self.infer):
            for f in fields(sect):
                v = getattr(sect, f.name)
                out[f.name] = list(v) if isinstance(v, tuple) else v
        for k in _AUG_KEYS:
            v = getattr(self.aug, k)
            out[_AUG_PREFIX + k] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        known = set(default_keys())
        for k in flat:
            if k not in known:
                raise ConfigError(k, f"unknown config key {k!r}")
        variant = flat.get("variant", "default")
        if variant not in VARIANTS:
            raise ConfigError("variant", f"unknown variant {variant!r}, expected one of {sorted(VARIANTS)}")
        defaults = default_keys()
        flat = {k: _coerce(k, v, defaults[k]) for k, v in flat.items()}
        merged = {**defaults, **VARIANTS[variant], **flat}
        try:
            model = ModelConfig(**{f.name: merged[f.name] for f in fields(ModelConfig)})
            train = TrainConfig(**{f.name: merged[f.name] for f in fields(TrainConfig)})
            infer = InferenceConfig(**{f.name: merged[f.name] for f in fields(InferenceConfig)})
            aug = AugmentConfig(**{k: merged[_AUG_PREFIX + k] for k in _AUG_KEYS})
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError("?", f"invalid config: {exc}") from exc
        if isinstance(aug.blur_sigma, list):
            aug = dataclasses.replace(aug, blur_sigma=tuple(aug.blur_sigma))
        return cls(model, train, infer, aug, float(merged["match_radius"]), variant)

    def with_overrides(self, **kw) -> "RunConfig":
        return RunConfig.from_flat({**self.to_flat(), **kw})


def _coerce(key: str, value, default):
    """Cast *value* to the type of *default*; YAML 1.1 reads ``1e-4`` as a string."""
    if isinstance(default, bool) or default is None or not isinstance(value, str):
        return value
    if isinstance(default, (int, float)):
        try:
            return type(default)(value)
        except ValueError:
            raise ConfigError(key, f"{key}: expected a number, got {value!r}") from None
    return value


def default_keys() -> dict:
    return RunConfig().to_flat()


def parse_value(text: str):
    """Parse a CLI override value with YAML scalar rules (``true``, ``[80, 90]``).

    Numbers such as ``1e-4`` may come back as strings; :meth:`RunConfig.from_flat` casts them.
    """
    return yaml.safe_load(text)


def read_config_file(path) -> dict:
    """Raw key/value mapping from a YAML file (no defaults applied)."""
    try:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError("?", f"{path}: not valid YAML ({exc})") from exc
    if not isinstance(loaded, dict):
        raise ConfigError("?", f"{path}: config must be a key/value mapping")
    return loaded


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    flat = read_config_file(path) if path is not None else {}
    flat.update(overrides or {})
    return RunConfig.from_flat(flat)


def dump_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(cfg.to_flat(), sort_keys=True))
    return path


def desk_config(**overrides) -> RunConfig:
    """Narrow widths for 128x128 CPU experiments (backbone contract unchanged)."""
    flat = dict(
        variant="M", backbone="hr-small", num_classes=2, kernel_dim=32, jpfm_branch_channels=32,
        jpfm_out_channels=64, head_channels=64, feature_channels=32, gn_groups=16,
        epochs=30, base_lr=1e-3, lr_drops=[24, 28], batch_size=8, crop_size=128, val_fraction=0.1,
        val_every=5, tile=128, overlap=32, aug_elastic_prob=0.0, aug_hue=0.0,
    )
    flat.update(overrides)
    return RunConfig.from_flat(flat)
