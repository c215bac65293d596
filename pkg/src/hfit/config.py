"""Run configuration: YAML files with a strict, fully validated schema.

Unknown keys are rejected rather than ignored so a typo in an ablation
config cannot silently fall back to a default and invalidate a
comparison. Section defaults match the documented field defaults; the
desk-scale preset lives in configs/desk.yaml.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .backbone import BackboneConfig
from .data import AugmentConfig
from .dspe import StemConfig
from .model import HFITConfig


class ConfigError(ValueError):
    pass


@dataclass
class SyntheticSpec:
    height: int = 64
    width: int = 64
    classes: int = 6
    count: int = 16
    eval_count: int = 8
    min_regions: int = 3
    max_regions: int = 8


@dataclass
class DataConfig:
    source: str = "synthetic"            # "synthetic" | "directory"
    root: str | None = None
    train_split: str = "train"
    eval_split: str = "val"
    seed: int = 0
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    augment: AugmentConfig = field(default_factory=AugmentConfig)


@dataclass
class TrainConfig:
    iterations: int = 20000
    lr: float = 1e-4
    weight_decay: float = 0.01
    warmup_steps: int = 100
    checkpoint_every: int = 1000
    out_dir: str = "runs/hfit"


@dataclass
class RunConfig:
    model: HFITConfig = field(default_factory=HFITConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def _expect_mapping(value, path: str) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"{path} must be a mapping, got {type(value).__name__}")
    return dict(value)


def _take(section: dict, key: str, path: str, kind, default):
    if key not in section:
        return default
    value = section.pop(key)
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is not None and not isinstance(value, kind):
        raise ConfigError(
            f"{path}.{key} must be {getattr(kind, '__name__', kind)}, "
            f"got {type(value).__name__}"
        )
    return value


def _reject_unknown(section: dict, path: str) -> None:
    if section:
        keys = ", ".join(sorted(section))
        raise ConfigError(f"unknown key(s) under {path}: {keys}")


def _parse_model(section: dict) -> HFITConfig:
    path = "model"
    crop_size = _take(section, "crop_size", path, int, 448)
    pos_default = max(1, crop_size // 16)
    backbone = BackboneConfig(
        embed_dim=_take(section, "embed_dim", path, int, 192),
        depth=_take(section, "depth", path, int, 8),
        heads=_take(section, "heads", path, int, 3),
        stages=_take(section, "stages", path, int, 4),
        mlp_ratio=_take(section, "mlp_ratio", path, float, 4.0),
        pos_table_side=_take(section, "pos_table_side", path, int, pos_default),
    )
    stem = StemConfig(
        channels=tuple(_take(section, "stem_channels", path, list, [24, 48, 96])),
        block=_take(section, "stem_block", path, str, "plain"),
        shared=_take(section, "stem_shared", path, bool, False),
    )
    config = HFITConfig(
        backbone=backbone,
        stem=stem,
        num_classes=_take(section, "num_classes", path, int, 6),
        adapter_heads=_take(section, "adapter_heads", path, int, 3),
        entropy_kernel=_take(section, "entropy_kernel", path, int, 3),
        entropy_dilation=_take(section, "entropy_dilation", path, int, 2),
        entropy_eps=_take(section, "entropy_eps", path, float, 1e-6),
        confidence_resample=_take(section, "confidence_resample", path, str, "bilinear"),
        gate_kernels=tuple(_take(section, "gate_kernels", path, list, [7, 5, 3])),
        ffn_ratio=_take(section, "ffn_ratio", path, float, 4.0),
        decoder_channels=_take(section, "decoder_channels", path, int, 64),
        crop_size=crop_size,
        ignore_index=_take(section, "ignore_index", path, int, 255),
        seed=_take(section, "seed", path, int, 0),
        freeze_backbone=_take(section, "freeze_backbone", path, bool, True),
        backbone_checkpoint=_take(section, "backbone_checkpoint", path, str, None),
    )
    _reject_unknown(section, path)
    return config


def _parse_synthetic(section: dict) -> SyntheticSpec:
    path = "data.synthetic"
    spec = SyntheticSpec(
        height=_take(section, "height", path, int, 64),
        width=_take(section, "width", path, int, 64),
        classes=_take(section, "classes", path, int, 6),
        count=_take(section, "count", path, int, 16),
        eval_count=_take(section, "eval_count", path, int, 8),
        min_regions=_take(section, "min_regions", path, int, 3),
        max_regions=_take(section, "max_regions", path, int, 8),
    )
    _reject_unknown(section, path)
    return spec


def _parse_augment(section: dict, crop_size: int, ignore_index: int) -> AugmentConfig:
    path = "data.augment"
    config = AugmentConfig(
        enabled=_take(section, "enabled", path, bool, True),
        crop_size=crop_size,
        scale_min=_take(section, "scale_min", path, float, 0.75),
        scale_max=_take(section, "scale_max", path, float, 1.25),
        hflip_prob=_take(section, "hflip_prob", path, float, 0.5),
        brightness=_take(section, "brightness", path, float, 0.25),
        contrast=_take(section, "contrast", path, float, 0.25),
        saturation=_take(section, "saturation", path, float, 0.2),
        ignore_index=ignore_index,
    )
    _reject_unknown(section, path)
    return config


def _parse_data(section: dict, model: HFITConfig) -> DataConfig:
    path = "data"
    synthetic = _parse_synthetic(_expect_mapping(section.pop("synthetic", None), "data.synthetic"))
    augment = _parse_augment(
        _expect_mapping(section.pop("augment", None), "data.augment"),
        model.crop_size, model.ignore_index,
    )
    config = DataConfig(
        source=_take(section, "source", path, str, "synthetic"),
        root=_take(section, "root", path, str, None),
        train_split=_take(section, "train_split", path, str, "train"),
        eval_split=_take(section, "eval_split", path, str, "val"),
        seed=_take(section, "seed", path, int, 0),
        synthetic=synthetic,
        augment=augment,
    )
    _reject_unknown(section, path)
    if config.source not in ("synthetic", "directory"):
        raise ConfigError(f"data.source must be 'synthetic' or 'directory', got {config.source!r}")
    if config.source == "directory" and not config.root:
        raise ConfigError("data.root is required when data.source is 'directory'")
    if config.source == "synthetic" and synthetic.classes != model.num_classes:
        raise ConfigError(
            f"data.synthetic.classes ({synthetic.classes}) must equal "
            f"model.num_classes ({model.num_classes})"
        )
    return config


def _parse_train(section: dict) -> TrainConfig:
    path = "train"
    config = TrainConfig(
        iterations=_take(section, "iterations", path, int, 20000),
        lr=_take(section, "lr", path, float, 1e-4),
        weight_decay=_take(section, "weight_decay", path, float, 0.01),
        warmup_steps=_take(section, "warmup_steps", path, int, 100),
        checkpoint_every=_take(section, "checkpoint_every", path, int, 1000),
        out_dir=_take(section, "out_dir", path, str, "runs/hfit"),
    )
    _reject_unknown(section, path)
    if config.iterations < 1:
        raise ConfigError("train.iterations must be >= 1")
    return config


def run_config_from_dict(payload: dict) -> RunConfig:
    payload = _expect_mapping(payload, "<root>")
    model_section = _expect_mapping(payload.pop("model", None), "model")
    data_section = _expect_mapping(payload.pop("data", None), "data")
    train_section = _expect_mapping(payload.pop("train", None), "train")
    _reject_unknown(payload, "<root>")
    try:
        model = _parse_model(model_section)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    data = _parse_data(data_section, model)
    train = _parse_train(train_section)
    return RunConfig(model=model, data=data, train=train)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        payload = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return run_config_from_dict(payload if payload is not None else {})
