"""Model / training configuration records and the JSON config loader.

JSON schema (every key optional except ``num_classes``)::

    {
      "num_classes": 2,
      "image_size": 128,
      "backbone": {"channels": [32, 64, 128, 256], "sa_blocks": [1, 1, 2, 1],
                   "heads": [2, 2, 4, 8], "window_size": 4, "ffn_ratio": 4.0},
      "encoder": {"sae_width": 256, "tae_width": 512, "num_group_blocks": 2,
                  "num_global_blocks": 1, "sae_heads": 8, "tae_heads": 8, "ffn_ratio": 4.0},
      "head": {"anchor_sizes": [32, 64, 128, 256, 512], "k": 4, "iou_neg_ignore": 0.7,
               "iou_pos_min": 0.15, "focal_alpha": 0.25, "focal_gamma": 2.0,
               "cls_weight": 1.0, "reg_weight": 2.0, "score_thresh": 0.05,
               "nms_iou": 0.6, "max_dets": 100},
      "train": {"epochs": 12, "batch_size": 4, "lr": 1e-4, "weight_decay": 0.05,
                "lr_steps": [0.67, 0.89], "lr_gamma": 0.1, "seed": 0, "grad_clip": 1.0,
                "hflip": false, "checkpoint_every": 1, "eval_every": 0,
                "max_steps": null, "target_ap50": null},
      "input": {"pixel_mean": [0.485, 0.456, 0.406], "pixel_std": [0.229, 0.224, 0.225]}
    }
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .backbone import BackboneConfig, DotStageConfig, check_image_size
from .encoders import EncoderConfig
from .errors import ConfigError, DFFTError
from .head import DEFAULT_SIZES


@dataclass(frozen=True)
class HeadConfig:
    anchor_sizes: tuple[float, ...] = DEFAULT_SIZES
    k: int = 4
    iou_neg_ignore: float = 0.7
    iou_pos_min: float = 0.15
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    cls_weight: float = 1.0
    reg_weight: float = 2.0
    score_thresh: float = 0.05
    nms_iou: float = 0.6
    max_dets: int = 100

    @property
    def K(self) -> int:
        return len(self.anchor_sizes)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 0.05
    lr_steps: tuple[float, ...] = (0.67, 0.89)
    lr_gamma: float = 0.1
    seed: int = 0
    grad_clip: float | None = 1.0
    hflip: bool = False
    checkpoint_every: int = 1
    eval_every: int = 0
    max_steps: int | None = None
    target_ap50: float | None = None


@dataclass(frozen=True)
class InputConfig:
    pixel_mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    pixel_std: tuple[float, float, float] = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    image_size: int = 128
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    input: InputConfig = field(default_factory=InputConfig)

    def validate(self) -> "ModelConfig":
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        try:
            check_image_size(self.backbone, self.image_size, self.image_size)
        except DFFTError as e:
            raise ConfigError(f"image_size: {e}") from None
        if not self.head.anchor_sizes:
            raise ConfigError("head.anchor_sizes must be non-empty")
        if self.head.k < 1:
            raise ConfigError("head.k must be >= 1")
        t = self.train
        if t.epochs < 1 or t.batch_size < 1:
            raise ConfigError("train.epochs and train.batch_size must be >= 1")
        if t.lr < 0 or t.weight_decay < 0:
            raise ConfigError("train.lr and train.weight_decay must be non-negative")
        if any(not 0 < f <= 1 for f in t.lr_steps):
            raise ConfigError("train.lr_steps must be fractions in (0, 1]")
        if t.checkpoint_every < 0 or t.eval_every < 0:
            raise ConfigError("train.checkpoint_every and train.eval_every must be >= 0")
        return self

    def to_dict(self) -> dict[str, Any]:
        b = self.backbone
        return {
            "num_classes": self.num_classes,
            "image_size": self.image_size,
            "backbone": {
                "channels": [s.channels for s in b.stages],
                "sa_blocks": [s.num_sa_blocks for s in b.stages],
                "heads": [s.num_heads for s in b.stages],
                "window_size": [s.window_size for s in b.stages],
                "ffn_ratio": b.stages[0].ffn_ratio,
            },
            "encoder": dataclasses.asdict(self.encoder),
            "head": _plain(dataclasses.asdict(self.head)),
            "train": _plain(dataclasses.asdict(self.train)),
            "input": _plain(dataclasses.asdict(self.input)),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def replace(self, **sections) -> "ModelConfig":
        """Copy with selected fields replaced; nested sections accept dicts of overrides."""
        kw = {}
        for key, value in sections.items():
            cur = getattr(self, key)
            if isinstance(value, dict) and dataclasses.is_dataclass(cur):
                value = dataclasses.replace(cur, **value)
            kw[key] = value
        return dataclasses.replace(self, **kw).validate()


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


_BACKBONE_KEYS = {"channels", "sa_blocks", "heads", "window_size", "ffn_ratio"}


def _section(cls, raw: Any, name: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"{name}: unknown key(s) {unknown}")
    kw = {}
    for key, value in raw.items():
        default = getattr(cls(), key) if key in known and known[key].default is not dataclasses.MISSING else None
        if isinstance(value, list):
            value = tuple(value)
        if value is None:
            if "None" not in str(known[key].type):
                raise ConfigError(f"{name}.{key}: may not be null")
            kw[key] = value
            continue
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"{name}.{key}: expected a boolean")
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{name}.{key}: expected a number, got {value!r}")
            if isinstance(default, int) and not isinstance(value, int):
                raise ConfigError(f"{name}.{key}: expected an integer, got {value!r}")
        kw[key] = value
    try:
        return cls(**kw)
    except DFFTError as e:
        raise ConfigError(f"{name}: {e}") from None


def _backbone(raw: Any) -> BackboneConfig:
    if raw is None:
        return BackboneConfig()
    if not isinstance(raw, dict):
        raise ConfigError("backbone: expected an object")
    unknown = sorted(set(raw) - _BACKBONE_KEYS)
    if unknown:
        raise ConfigError(f"backbone: unknown key(s) {unknown}")
    base = BackboneConfig()
    channels = raw.get("channels", [s.channels for s in base.stages])
    sa = raw.get("sa_blocks", [s.num_sa_blocks for s in base.stages])
    heads = raw.get("heads", [s.num_heads for s in base.stages])
    win = raw.get("window_size", 4)
    ratio = raw.get("ffn_ratio", 4.0)
    if isinstance(win, int):
        win = [win] * 4
    for key, value in (("channels", channels), ("sa_blocks", sa), ("heads", heads), ("window_size", win)):
        if not isinstance(value, list) or len(value) != 4 or not all(isinstance(v, int) for v in value):
            raise ConfigError(f"backbone.{key}: expected 4 integers, got {value!r}")
    if any(a > b for a, b in zip(channels, channels[1:])):
        raise ConfigError(f"backbone.channels: non-decreasing channel widths required, got {channels}")
    try:
        return BackboneConfig(tuple(DotStageConfig(c, b, h, m, float(ratio)) for c, b, h, m in zip(channels, sa, heads, win)))
    except DFFTError as e:
        raise ConfigError(f"backbone: {e}") from None


_TOP_KEYS = {"num_classes", "image_size", "backbone", "encoder", "head", "train", "input"}


def config_from_dict(raw: dict[str, Any]) -> ModelConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown}")
    if "num_classes" not in raw:
        raise ConfigError("num_classes is required")
    nc = raw["num_classes"]
    size = raw.get("image_size", 128)
    if not isinstance(nc, int) or isinstance(nc, bool):
        raise ConfigError("num_classes: expected an integer")
    if not isinstance(size, int) or isinstance(size, bool):
        raise ConfigError("image_size: expected an integer")
    cfg = ModelConfig(
        num_classes=nc,
        image_size=size,
        backbone=_backbone(raw.get("backbone")),
        encoder=_section(EncoderConfig, raw.get("encoder"), "encoder"),
        head=_section(HeadConfig, raw.get("head"), "head"),
        train=_section(TrainConfig, raw.get("train"), "train"),
        input=_section(InputConfig, raw.get("input"), "input"),
    )
    return cfg.validate()


def load_config(path: str | Path) -> ModelConfig:
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: JSON parse error at line {e.lineno}, column {e.colno}: {e.msg}") from None
    return config_from_dict(raw)


def micro_config(num_classes: int = 2, image_size: int = 128, **overrides) -> ModelConfig:
    """The default desk-scale configuration."""
    cfg = ModelConfig(num_classes=num_classes, image_size=image_size)
    return cfg.replace(**overrides) if overrides else cfg.validate()
