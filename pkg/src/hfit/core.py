"""Shared tensor-layout conventions.

Every module in this package moves features between two views: token
matrices of shape (T, D) and spatial grids of shape (h, w, c), channels
last. A token pyramid concatenates row-major flattened grids at strides
8, 16 and 32 and records per-level shapes and offsets so the two views
stay losslessly convertible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

PYRAMID_STRIDES = (8, 16, 32)
RESAMPLE_MODES = ("bilinear", "nearest")


@dataclass(frozen=True)
class LevelSpec:
    """Shape and placement of one pyramid level inside the token sequence."""

    stride: int
    grid_h: int
    grid_w: int
    token_offset: int

    def __post_init__(self) -> None:
        if self.stride not in PYRAMID_STRIDES:
            raise ValueError(f"stride must be one of {PYRAMID_STRIDES}, got {self.stride}")
        if self.grid_h < 1 or self.grid_w < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.grid_h}x{self.grid_w}")
        if self.token_offset < 0:
            raise ValueError("token_offset must be nonnegative")

    @property
    def token_count(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def token_end(self) -> int:
        return self.token_offset + self.token_count


@dataclass
class TokenPyramid:
    """Flattened multi-scale tokens (1/8, 1/16, 1/32) with level metadata."""

    tokens: torch.Tensor
    levels: tuple[LevelSpec, ...]

    def __post_init__(self) -> None:
        if self.tokens.ndim != 2:
            raise ValueError(f"pyramid tokens must be (T, D), got shape {tuple(self.tokens.shape)}")
        if len(self.levels) != len(PYRAMID_STRIDES):
            raise ValueError(f"expected {len(PYRAMID_STRIDES)} levels, got {len(self.levels)}")
        offset = 0
        for level, stride in zip(self.levels, PYRAMID_STRIDES):
            if level.stride != stride:
                raise ValueError(f"levels must be ordered by stride {PYRAMID_STRIDES}")
            if level.token_offset != offset:
                raise ValueError(
                    f"level at stride {stride} has offset {level.token_offset}, expected {offset}"
                )
            offset = level.token_end
        if offset != self.tokens.shape[0]:
            raise ValueError(f"levels cover {offset} tokens but matrix has {self.tokens.shape[0]}")

    @property
    def token_count(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    def level_tokens(self, index: int) -> torch.Tensor:
        spec = self.levels[index]
        return self.tokens[spec.token_offset : spec.token_end]

    def with_tokens(self, tokens: torch.Tensor) -> "TokenPyramid":
        """Same level structure, new token values."""
        return TokenPyramid(tokens=tokens, levels=self.levels)


@dataclass
class ViTTokens:
    """Single-scale (1/16) backbone token sequence."""

    tokens: torch.Tensor
    grid_h: int
    grid_w: int

    def __post_init__(self) -> None:
        if self.tokens.ndim != 2:
            raise ValueError(f"tokens must be (N, D), got shape {tuple(self.tokens.shape)}")
        if self.tokens.shape[0] != self.grid_h * self.grid_w:
            raise ValueError(
                f"token count {self.tokens.shape[0]} does not match "
                f"{self.grid_h}x{self.grid_w} grid"
            )

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    def with_tokens(self, tokens: torch.Tensor) -> "ViTTokens":
        return ViTTokens(tokens=tokens, grid_h=self.grid_h, grid_w=self.grid_w)


def grid_to_tokens(grid: torch.Tensor) -> torch.Tensor:
    """Row-major flattening: grid cell (r, c) becomes token row r*w + c."""
    if grid.ndim != 3:
        raise ValueError(f"expected (h, w, c) grid, got shape {tuple(grid.shape)}")
    h, w, c = grid.shape
    return grid.reshape(h * w, c)


def tokens_to_grid(tokens: torch.Tensor, grid_h: int, grid_w: int) -> torch.Tensor:
    """Inverse of grid_to_tokens."""
    if tokens.ndim != 2:
        raise ValueError(f"expected (T, c) tokens, got shape {tuple(tokens.shape)}")
    if tokens.shape[0] != grid_h * grid_w:
        raise ValueError(
            f"cannot reshape {tokens.shape[0]} tokens into a {grid_h}x{grid_w} grid"
        )
    return tokens.reshape(grid_h, grid_w, tokens.shape[1])


def pyramid_level_shapes(height: int, width: int) -> list[tuple[int, int]]:
    """Per-level grid shapes for an input divisible by 32."""
    if height % 32 != 0 or width % 32 != 0:
        raise ValueError(f"input size {height}x{width} must be divisible by 32")
    return [(height // s, width // s) for s in PYRAMID_STRIDES]


def pyramid_token_count(height: int, width: int) -> int:
    return sum(h * w for h, w in pyramid_level_shapes(height, width))


def flatten_concat(grids: Sequence[torch.Tensor]) -> TokenPyramid:
    """Flatten three stride-8/16/32 grids and concatenate them in that order."""
    if len(grids) != len(PYRAMID_STRIDES):
        raise ValueError(f"expected {len(PYRAMID_STRIDES)} grids, got {len(grids)}")
    for grid in grids:
        if grid.ndim != 3:
            raise ValueError(f"each grid must be (h, w, c), got shape {tuple(grid.shape)}")
    height = grids[0].shape[0] * PYRAMID_STRIDES[0]
    width = grids[0].shape[1] * PYRAMID_STRIDES[0]
    dim = grids[0].shape[2]
    levels = []
    offset = 0
    for grid, stride in zip(grids, PYRAMID_STRIDES):
        h, w, c = grid.shape
        if (h * stride, w * stride) != (height, width):
            raise ValueError(
                f"grid {h}x{w} at stride {stride} is inconsistent with input size "
                f"{height}x{width} implied by the stride-8 grid"
            )
        if c != dim:
            raise ValueError(f"channel mismatch across levels: {c} vs {dim}")
        levels.append(LevelSpec(stride=stride, grid_h=h, grid_w=w, token_offset=offset))
        offset += h * w
    tokens = torch.cat([grid_to_tokens(g) for g in grids], dim=0)
    return TokenPyramid(tokens=tokens, levels=tuple(levels))


def split_levels(pyramid: TokenPyramid) -> list[torch.Tensor]:
    """Exact inverse of flatten_concat."""
    return [
        tokens_to_grid(pyramid.level_tokens(i), spec.grid_h, spec.grid_w)
        for i, spec in enumerate(pyramid.levels)
    ]


def resample(grid: torch.Tensor, target_h: int, target_w: int, mode: str = "bilinear") -> torch.Tensor:
    """Spatially resize an (h, w, c) grid. Bilinear output stays within input bounds."""
    if grid.ndim != 3:
        raise ValueError(f"expected (h, w, c) grid, got shape {tuple(grid.shape)}")
    if mode not in RESAMPLE_MODES:
        raise ValueError(f"mode must be one of {RESAMPLE_MODES}, got {mode!r}")
    if target_h < 1 or target_w < 1:
        raise ValueError("target size must be at least 1x1")
    if (target_h, target_w) == grid.shape[:2]:
        return grid.clone()
    x = grid.permute(2, 0, 1).unsqueeze(0)
    if mode == "bilinear":
        y = F.interpolate(x, size=(target_h, target_w), mode="bilinear", align_corners=False)
    else:
        y = F.interpolate(x, size=(target_h, target_w), mode="nearest")
    return y.squeeze(0).permute(1, 2, 0)
