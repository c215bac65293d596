"""Duplex spatial prior extractor.

Twin convolutional stems run over the RGB raster and the replicated
relative-depth raster, each producing a 1/8, 1/16, 1/32 feature pyramid.
Matching levels are merged by element-wise summation and projected to the
shared token dimension, then flattened into the heterogeneous spatial
prior consumed by the fusion stages.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn

from .core import TokenPyramid, flatten_concat
from .layers import ConvNormAct, InvertedBottleneck, grid_to_nchw, nchw_to_grid

STEM_BLOCKS = ("plain", "inverted_bottleneck")
BRANCHES = ("rgb", "depth")


@dataclass
class StemConfig:
    channels: tuple[int, int, int] = (24, 48, 96)
    block: str = "plain"
    shared: bool = False

    def __post_init__(self) -> None:
        self.channels = tuple(self.channels)
        if len(self.channels) != 3 or any(c < 1 for c in self.channels):
            raise ValueError(f"channels must be three positive integers, got {self.channels}")
        if self.block not in STEM_BLOCKS:
            raise ValueError(f"block must be one of {STEM_BLOCKS}, got {self.block!r}")


@dataclass
class PriorPyramid:
    """Three D-channel grids at 1/8, 1/16, 1/32."""

    grids: tuple[torch.Tensor, torch.Tensor, torch.Tensor]

    def __post_init__(self) -> None:
        self.grids = tuple(self.grids)
        if len(self.grids) != 3:
            raise ValueError("prior pyramid has exactly three levels")
        dim = self.grids[0].shape[2]
        if any(g.shape[2] != dim for g in self.grids):
            raise ValueError("all prior levels must share the channel count")


def _down_block(kind: str, in_ch: int, out_ch: int) -> nn.Module:
    if kind == "plain":
        return ConvNormAct(in_ch, out_ch, stride=2)
    return InvertedBottleneck(in_ch, out_ch, stride=2)


class SpatialPriorStem(nn.Module):
    """Three-stage stride-2 stem emitting features at 1/8, 1/16 and 1/32."""

    def __init__(self, config: StemConfig):
        super().__init__()
        c2, c3, c4 = config.channels
        entry = max(c2 // 2, 4)
        self.stage1 = nn.Sequential(
            ConvNormAct(3, entry, stride=2),
            _down_block(config.block, entry, c2),
            _down_block(config.block, c2, c2),
        )
        self.stage2 = _down_block(config.block, c2, c3)
        self.stage3 = _down_block(config.block, c3, c4)

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) raster, got shape {tuple(image.shape)}")
        h, w = image.shape[0], image.shape[1]
        if h % 32 != 0 or w % 32 != 0:
            raise ValueError(f"input size {h}x{w} must be divisible by 32")
        x = grid_to_nchw(image)
        f8 = self.stage1(x)
        f16 = self.stage2(f8)
        f32 = self.stage3(f16)
        return [nchw_to_grid(f) for f in (f8, f16, f32)]


class DSPE(nn.Module):
    def __init__(self, config: StemConfig, embed_dim: int):
        super().__init__()
        self.config = config
        self.embed_dim = embed_dim
        self.rgb_stem = SpatialPriorStem(config)
        self.depth_stem = self.rgb_stem if config.shared else SpatialPriorStem(config)
        self.projections = nn.ModuleList(
            nn.Conv2d(c, embed_dim, 1) for c in config.channels
        )

    def extract_pyramid(self, image: torch.Tensor, branch: str) -> list[torch.Tensor]:
        """Run one branch's stem; grids come back at the stem channel counts."""
        if branch not in BRANCHES:
            raise ValueError(f"branch must be one of {BRANCHES}, got {branch!r}")
        stem = self.rgb_stem if branch == "rgb" else self.depth_stem
        return stem(image)

    def fuse_and_project(self, pyr_rgb: Sequence[torch.Tensor],
                         pyr_depth: Sequence[torch.Tensor]) -> PriorPyramid:
        """Per level: 1x1-project the element-wise sum of the two branches."""
        if len(pyr_rgb) != 3 or len(pyr_depth) != 3:
            raise ValueError("both pyramids must have three levels")
        fused = []
        for a, b, proj in zip(pyr_rgb, pyr_depth, self.projections):
            if a.shape != b.shape:
                raise ValueError(
                    f"branch shapes differ at a level: {tuple(a.shape)} vs {tuple(b.shape)}"
                )
            fused.append(nchw_to_grid(proj(grid_to_nchw(a + b))))
        return PriorPyramid(grids=tuple(fused))

    def build_prior(self, rgb: torch.Tensor, depth3: torch.Tensor) -> TokenPyramid:
        """Full extractor: duplex stems, sum-fuse, project, flatten-concat."""
        if rgb.shape != depth3.shape:
            raise ValueError(
                f"rgb and depth rasters must match: {tuple(rgb.shape)} vs {tuple(depth3.shape)}"
            )
        pyr_rgb = self.extract_pyramid(rgb, "rgb")
        pyr_depth = self.extract_pyramid(depth3, "depth")
        return flatten_concat(self.fuse_and_project(pyr_rgb, pyr_depth).grids)
