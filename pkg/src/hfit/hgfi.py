"""Holistic gated feature integration.

Per-token per-channel sigmoid gates decide how much of each earlier
stage's feature is folded into the current one:

    merged = (1 + gate) * current + (1 - gate) * sum_l gate_l * feature_l

with the sum running over strictly earlier stages (empty at stage 1).
The backbone branch gates come from a 1x1 conv at 1/16; the prior branch
uses depth-wise convs with per-level kernel sizes so coarse and fine
levels see different receptive fields. An extractor (cross-attention +
feed-forward, both residual) then refreshes the spatial prior from the
merged backbone feature.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn as nn

from .core import TokenPyramid, ViTTokens, grid_to_tokens, tokens_to_grid
from .layers import CrossAttention, FeedForward, grid_to_nchw, nchw_to_grid

HistoryEntry = tuple[torch.Tensor, torch.Tensor]


@dataclass
class StageHistory:
    """Per-branch record of completed stages: (feature tokens, gate) pairs."""

    vit: list[HistoryEntry] = field(default_factory=list)
    prior: list[HistoryEntry] = field(default_factory=list)


def gated_merge(current: torch.Tensor, gate: torch.Tensor,
                history: Sequence[HistoryEntry]) -> torch.Tensor:
    """The gating rule on raw (T, D) tensors; shared by both branches."""
    if gate.shape != current.shape:
        raise ValueError(
            f"gate shape {tuple(gate.shape)} must match feature shape {tuple(current.shape)}"
        )
    acc = torch.zeros_like(current)
    for feat, g in history:
        if feat.shape != current.shape or g.shape != current.shape:
            raise ValueError("history entries must match the current feature shape")
        acc = acc + g * feat
    return (1.0 + gate) * current + (1.0 - gate) * acc


def integrate_vit(current: ViTTokens, gate: torch.Tensor,
                  history: Sequence[HistoryEntry]) -> ViTTokens:
    return current.with_tokens(gated_merge(current.tokens, gate, history))


def integrate_prior(current: TokenPyramid, gate: torch.Tensor,
                    history: Sequence[HistoryEntry]) -> TokenPyramid:
    return current.with_tokens(gated_merge(current.tokens, gate, history))


class HGFIStage(nn.Module):
    def __init__(self, embed_dim: int, heads: int,
                 gate_kernels: tuple[int, int, int] = (7, 5, 3),
                 ffn_ratio: float = 4.0):
        super().__init__()
        if len(gate_kernels) != 3:
            raise ValueError(f"need one gate kernel per pyramid level, got {gate_kernels}")
        self.embed_dim = embed_dim
        self.vit_gate_conv = nn.Conv2d(embed_dim, embed_dim, 1)
        self.prior_gate_convs = nn.ModuleList(
            nn.Conv2d(embed_dim, embed_dim, k, padding=k // 2, groups=embed_dim)
            for k in gate_kernels
        )
        self.extract_query_norm = nn.LayerNorm(embed_dim)
        self.extract_kv_norm = nn.LayerNorm(embed_dim)
        self.extract_attn = CrossAttention(embed_dim, heads)
        self.ffn_norm = nn.LayerNorm(embed_dim)
        self.ffn = FeedForward(embed_dim, ffn_ratio)

    def vit_gate(self, vit: ViTTokens) -> torch.Tensor:
        grid = tokens_to_grid(vit.tokens, vit.grid_h, vit.grid_w)
        gate = torch.sigmoid(self.vit_gate_conv(grid_to_nchw(grid)))
        return grid_to_tokens(nchw_to_grid(gate))

    def prior_gate(self, prior: TokenPyramid) -> torch.Tensor:
        parts = []
        for i, spec in enumerate(prior.levels):
            grid = tokens_to_grid(prior.level_tokens(i), spec.grid_h, spec.grid_w)
            gate = torch.sigmoid(self.prior_gate_convs[i](grid_to_nchw(grid)))
            parts.append(grid_to_tokens(nchw_to_grid(gate)))
        return torch.cat(parts, dim=0)

    def extract(self, prior: TokenPyramid, vit_next: ViTTokens) -> TokenPyramid:
        """Refresh the prior from backbone tokens: residual attention, residual FFN."""
        if prior.dim != self.embed_dim or vit_next.dim != self.embed_dim:
            raise ValueError(
                f"token dimension mismatch: prior {prior.dim}, backbone {vit_next.dim}, "
                f"stage built for {self.embed_dim}"
            )
        attended = self.extract_attn(
            self.extract_query_norm(prior.tokens), self.extract_kv_norm(vit_next.tokens)
        )
        refreshed = prior.tokens + attended
        refreshed = refreshed + self.ffn(self.ffn_norm(refreshed))
        return prior.with_tokens(refreshed)
