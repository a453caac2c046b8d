"""Run configuration: nested dataclasses loaded from / dumped to JSON.

Defaults are the published pretraining hyper-parameters with the model,
dataset and schedule scaled down to desk size. Unknown keys are rejected and
every value is range-checked at load time.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Invalid configuration value or unknown key; message names the field."""


@dataclass
class ViTConfig:
    image_size: int = 64
    patch_size: int = 8
    in_chans: int = 3
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    ln_eps: float = 1e-6

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    def validate(self, prefix: str = "vit") -> None:
        for name in ("image_size", "patch_size", "in_chans", "embed_dim", "depth", "heads"):
            _positive(prefix, name, getattr(self, name))
        _positive(prefix, "mlp_ratio", self.mlp_ratio)
        _positive(prefix, "ln_eps", self.ln_eps)
        if self.embed_dim % self.heads:
            raise ConfigError(f"{prefix}.embed_dim ({self.embed_dim}) must be divisible by {prefix}.heads ({self.heads})")
        if self.image_size % self.patch_size:
            raise ConfigError(f"{prefix}.image_size ({self.image_size}) must be divisible by {prefix}.patch_size ({self.patch_size})")


# standard sizes; image 224, patch 16 -> 196 tokens
VIT_MICRO = ViTConfig()
VIT_TINY = ViTConfig(image_size=224, patch_size=16, embed_dim=192, depth=12, heads=3)
VIT_SMALL = ViTConfig(image_size=224, patch_size=16, embed_dim=384, depth=12, heads=6)
VIT_BASE = ViTConfig(image_size=224, patch_size=16, embed_dim=768, depth=12, heads=12)


@dataclass
class HeadConfig:
    proj_hidden: int = 256
    proj_out: int = 64
    pred_hidden: int = 256

    def validate(self, prefix: str = "heads") -> None:
        for name in ("proj_hidden", "proj_out", "pred_hidden"):
            _positive(prefix, name, getattr(self, name))


@dataclass
class SaliencyConfig:
    backend: str = "fine"
    threshold: float = 0.5

    def validate(self, prefix: str = "saliency") -> None:
        if self.backend not in ("fine", "spectral"):
            raise ConfigError(f"{prefix}.backend must be 'fine' or 'spectral', got {self.backend!r}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"{prefix}.threshold must lie in (0, 1), got {self.threshold}")


@dataclass
class ViewSpec:
    crop_scale: tuple[float, float] = (0.08, 0.8)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    rotation_prob: float = 1.0
    rotation_degrees: float = 180.0
    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)

    def validate(self, prefix: str = "view") -> None:
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigError(f"{prefix}.crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        rlo, rhi = self.crop_ratio
        if not 0.0 < rlo <= rhi:
            raise ConfigError(f"{prefix}.crop_ratio must satisfy 0 < lo <= hi, got {self.crop_ratio}")
        for name in ("hflip_prob", "vflip_prob", "rotation_prob", "jitter_prob", "blur_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{prefix}.{name} must lie in [0, 1], got {v}")
        for name in ("rotation_degrees", "brightness", "contrast", "saturation"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{prefix}.{name} must be >= 0, got {getattr(self, name)}")
        slo, shi = self.blur_sigma
        if not 0.0 < slo <= shi:
            raise ConfigError(f"{prefix}.blur_sigma must satisfy 0 < lo <= hi, got {self.blur_sigma}")


def _key_view() -> ViewSpec:
    return ViewSpec(crop_scale=(0.8, 1.0))


@dataclass
class AugmentConfig:
    query: ViewSpec = field(default_factory=ViewSpec)
    key: ViewSpec = field(default_factory=_key_view)

    def validate(self, prefix: str = "augment") -> None:
        self.query.validate(f"{prefix}.query")
        self.key.validate(f"{prefix}.key")


@dataclass
class PretrainConfig:
    epochs: int = 30
    warmup_epochs: int = 4
    batch_size: int = 64
    base_lr: float = 1e-3
    weight_decay: float = 0.1
    tau: float = 0.2
    alpha_start: float = 0.99
    alpha_end: float = 1.0
    masking_ratio: float = 25.0
    lambda_cl: float = 1.0
    lambda_seg: float = 10.0
    checkpoint_every: int = 0

    def validate(self, prefix: str = "pretrain") -> None:
        _positive(prefix, "epochs", self.epochs)
        _positive(prefix, "batch_size", self.batch_size)
        if self.batch_size < 2:
            raise ConfigError(f"{prefix}.batch_size must be >= 2 (in-batch negatives), got {self.batch_size}")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError(f"{prefix}.warmup_epochs must lie in [0, epochs], got {self.warmup_epochs}")
        for name in ("base_lr", "weight_decay", "lambda_cl", "lambda_seg"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{prefix}.{name} must be >= 0, got {getattr(self, name)}")
        _positive(prefix, "tau", self.tau)
        if not 0.99 <= self.alpha_start <= self.alpha_end <= 1.0:
            raise ConfigError(f"{prefix}.alpha_start/alpha_end must satisfy 0.99 <= start <= end <= 1, "
                              f"got {self.alpha_start}, {self.alpha_end}")
        if not 0 <= self.masking_ratio < 100:
            raise ConfigError(f"{prefix}.masking_ratio must lie in [0, 100), got {self.masking_ratio}")
        if self.checkpoint_every < 0:
            raise ConfigError(f"{prefix}.checkpoint_every must be >= 0, got {self.checkpoint_every}")


@dataclass
class EvalConfig:
    k: int = 10
    probe_epochs: int = 100
    probe_lr: float = 1e-2
    probe_batch_size: int = 64
    finetune_epochs: int = 10
    finetune_lr: float = 5e-4
    finetune_batch_size: int = 32
    weight_decay: float = 0.0

    def validate(self, prefix: str = "eval") -> None:
        _positive(prefix, "k", self.k)
        _positive(prefix, "probe_batch_size", self.probe_batch_size)
        _positive(prefix, "finetune_batch_size", self.finetune_batch_size)
        for name in ("probe_epochs", "finetune_epochs", "probe_lr", "finetune_lr", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{prefix}.{name} must be >= 0, got {getattr(self, name)}")


@dataclass
class PathConfig:
    data: str = "data"
    cache: str = "cache"
    out: str = "runs"


@dataclass
class RunConfig:
    seed: int = 0
    vit: ViTConfig = field(default_factory=ViTConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    saliency: SaliencyConfig = field(default_factory=SaliencyConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathConfig = field(default_factory=PathConfig)

    def validate(self) -> "RunConfig":
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        self.vit.validate()
        self.heads.validate()
        self.saliency.validate()
        self.augment.validate()
        self.pretrain.validate()
        self.eval.validate()
        return self

    def to_dict(self) -> dict[str, Any]:
        return _to_plain(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "RunConfig":
        return _from_plain(cls, doc, "").validate()

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(doc)


def _positive(prefix: str, name: str, value) -> None:
    if not value > 0:
        raise ConfigError(f"{prefix}.{name} must be > 0, got {value}")


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return list(obj)
    return obj


def _from_plain(cls, doc, prefix: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{prefix or 'config'} must be an object, got {type(doc).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    obj = cls()
    for name, value in doc.items():
        current = getattr(obj, name)
        path = f"{prefix}{name}"
        if dataclasses.is_dataclass(current):
            setattr(obj, name, _from_plain(type(current), value, path + "."))
        elif isinstance(current, tuple):
            if not isinstance(value, (list, tuple)) or len(value) != len(current):
                raise ConfigError(f"{path} must be a list of {len(current)} numbers, got {value!r}")
            setattr(obj, name, tuple(_coerce(path, c, v) for c, v in zip(current, value)))
        else:
            setattr(obj, name, _coerce(path, current, value))
    return obj


def _coerce(path: str, current, value):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be a boolean, got {value!r}")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number, got {value!r}")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string, got {value!r}")
        return value
    return value
