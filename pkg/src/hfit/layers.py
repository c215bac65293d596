"""Small building blocks shared across the adapter modules.

All attention here is dense and unbatched: queries and keys are plain
(N, D) token matrices. Convolutional helpers accept channels-last grids
at the boundary and handle the NCHW plumbing internally.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

INIT_STD = 0.02


def init_parameters(module: nn.Module, generator: torch.Generator | None = None,
                    std: float = INIT_STD) -> None:
    """Truncated-normal weights, zero biases, identity norms, recursively."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d)):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std, generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.LayerNorm, nn.BatchNorm2d, nn.GroupNorm)):
            if m.weight is not None:
                nn.init.ones_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def group_norm(channels: int, max_groups: int = 8) -> nn.GroupNorm:
    """Batch-independent normalization; same statistics in train and eval mode."""
    groups = min(max_groups, channels)
    while channels % groups:
        groups -= 1
    return nn.GroupNorm(groups, channels)


class CrossAttention(nn.Module):
    """Dense multi-head attention from every query token to every key token."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.o_proj = nn.Linear(dim, dim)

    def forward(self, query: torch.Tensor, feat: torch.Tensor,
                return_weights: bool = False):
        if query.shape[-1] != self.dim or feat.shape[-1] != self.dim:
            raise ValueError(
                f"token dimension mismatch: query {query.shape[-1]}, keys {feat.shape[-1]}, "
                f"attention built for {self.dim}"
            )
        nq, nk = query.shape[0], feat.shape[0]
        q = self.q_proj(query).reshape(nq, self.heads, self.head_dim).transpose(0, 1)
        k = self.k_proj(feat).reshape(nk, self.heads, self.head_dim).transpose(0, 1)
        v = self.v_proj(feat).reshape(nk, self.heads, self.head_dim).transpose(0, 1)
        weights = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(self.head_dim), dim=-1)
        out = (weights @ v).transpose(0, 1).reshape(nq, self.dim)
        out = self.o_proj(out)
        if return_weights:
            return out, weights
        return out


class FeedForward(nn.Module):
    """Expand-activate-project token MLP."""

    def __init__(self, dim: int, ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


def grid_to_nchw(grid: torch.Tensor) -> torch.Tensor:
    return grid.permute(2, 0, 1).unsqueeze(0)


def nchw_to_grid(x: torch.Tensor) -> torch.Tensor:
    return x.squeeze(0).permute(1, 2, 0)


class ConvNormAct(nn.Module):
    """3x3 conv + group norm + SiLU, the plain stem/decoder block."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, kernel: int = 3):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2, bias=False)
        self.norm = group_norm(out_ch)
        self.act = nn.SiLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.norm(self.conv(x)))


class InvertedBottleneck(nn.Module):
    """Expansion, depth-wise spatial mixing, linear projection; residual when shapes allow."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, expand: int = 4):
        super().__init__()
        hidden = in_ch * expand
        self.expand = nn.Conv2d(in_ch, hidden, 1, bias=False)
        self.expand_norm = group_norm(hidden)
        self.dw = nn.Conv2d(hidden, hidden, 3, stride=stride, padding=1, groups=hidden, bias=False)
        self.dw_norm = group_norm(hidden)
        self.project = nn.Conv2d(hidden, out_ch, 1, bias=False)
        self.project_norm = group_norm(out_ch)
        self.act = nn.SiLU()
        self.use_residual = stride == 1 and in_ch == out_ch

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.act(self.expand_norm(self.expand(x)))
        y = self.act(self.dw_norm(self.dw(y)))
        y = self.project_norm(self.project(y))
        if self.use_residual:
            y = y + x
        return y
