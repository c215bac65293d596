"""Frozen-ViT side adapter for RGB-depth semantic scene parsing."""

from .backbone import BackboneConfig, ViTBackbone
from .core import LevelSpec, TokenPyramid, ViTTokens
from .data import RGBDSample, synth_scene
from .dspe import DSPE, StemConfig
from .model import HFIT, AblationFlags, HFITConfig, build_model

__version__ = "0.1.0"

__all__ = [
    "AblationFlags",
    "BackboneConfig",
    "DSPE",
    "HFIT",
    "HFITConfig",
    "LevelSpec",
    "RGBDSample",
    "StemConfig",
    "TokenPyramid",
    "ViTBackbone",
    "ViTTokens",
    "build_model",
    "synth_scene",
]
