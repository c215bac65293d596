"""Recalibrated heterogeneous feature fusion.

Each stage scores both branches with an entropy-derived confidence in
(0, 1): class logits come from a 1x1 conv + batch norm + ReLU head, the
entropy surrogate -L * log(L + eps) is mixed by a dilated conv and
squashed by a sigmoid. The spatial prior is damped where the backbone is
already confident and amplified where its own confidence is high, then
injected into the backbone tokens by cross-attention scaled by a
zero-initialized per-channel vector, so the stage is exactly transparent
at initialization.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (
    LevelSpec,
    TokenPyramid,
    ViTTokens,
    grid_to_tokens,
    resample,
    tokens_to_grid,
)
from .layers import CrossAttention, grid_to_nchw, nchw_to_grid


def recalibrate(prior: TokenPyramid, vit_confidence: torch.Tensor,
                prior_confidence: torch.Tensor, use_vit_weight: bool = True,
                use_prior_weight: bool = True) -> TokenPyramid:
    """Per-token damping of the prior: (1 - backbone confidence) * own confidence.

    Either factor can be disabled (replaced by 1) for ablations; with both
    disabled this is the identity.
    """
    t = prior.token_count
    for name, vec in (("vit", vit_confidence), ("prior", prior_confidence)):
        if vec.ndim != 1 or vec.shape[0] != t:
            raise ValueError(
                f"{name} confidence must be a length-{t} vector, got shape {tuple(vec.shape)}"
            )
    if not use_vit_weight and not use_prior_weight:
        return prior.with_tokens(prior.tokens)
    weight = torch.ones_like(vit_confidence)
    if use_vit_weight:
        weight = weight * (1.0 - vit_confidence)
    if use_prior_weight:
        weight = weight * prior_confidence
    return prior.with_tokens(weight.unsqueeze(1) * prior.tokens)


# one batch-norm instance per feature stream: the backbone tokens and each
# pyramid level carry different statistics, so they must not pool them
LOGIT_STREAMS = ("vit", "p8", "p16", "p32")


class RHFFStage(nn.Module):
    def __init__(self, embed_dim: int, num_classes: int, heads: int,
                 entropy_kernel: int = 3, entropy_dilation: int = 2,
                 entropy_eps: float = 1e-6, resample_mode: str = "bilinear"):
        super().__init__()
        if entropy_eps <= 0:
            raise ValueError("entropy_eps must be positive")
        self.entropy_eps = entropy_eps
        self.resample_mode = resample_mode
        self.logit_conv = nn.Conv2d(embed_dim, num_classes, 1)
        self.logit_norms = nn.ModuleDict(
            {stream: nn.BatchNorm2d(num_classes) for stream in LOGIT_STREAMS}
        )
        pad = entropy_dilation * (entropy_kernel - 1) // 2
        self.entropy_conv = nn.Conv2d(
            num_classes, 1, entropy_kernel, dilation=entropy_dilation, padding=pad
        )
        self.query_norm = nn.LayerNorm(embed_dim)
        self.kv_norm = nn.LayerNorm(embed_dim)
        self.attn = CrossAttention(embed_dim, heads)
        self.gamma = nn.Parameter(torch.zeros(embed_dim))

    def logit_map(self, tokens: torch.Tensor, grid_h: int, grid_w: int,
                  stream: str = "vit") -> torch.Tensor:
        """Class-logit grid from tokens: ReLU(BN(Conv1x1)). Nonnegative by construction."""
        if stream not in LOGIT_STREAMS:
            raise ValueError(f"stream must be one of {LOGIT_STREAMS}, got {stream!r}")
        grid = tokens_to_grid(tokens, grid_h, grid_w)
        x = self.logit_conv(grid_to_nchw(grid))
        x = F.relu(self.logit_norms[stream](x))
        return nchw_to_grid(x)

    def confidence_from_logits(self, logits: torch.Tensor) -> torch.Tensor:
        """Single-channel confidence grid in (0, 1) from a nonnegative logit grid."""
        if logits.ndim != 3:
            raise ValueError(f"expected (h, w, C) logits, got shape {tuple(logits.shape)}")
        entropy = -logits * torch.log(logits + self.entropy_eps)
        x = self.entropy_conv(grid_to_nchw(entropy))
        return nchw_to_grid(torch.sigmoid(x))

    def vit_confidence(self, vit: ViTTokens, levels: tuple[LevelSpec, ...]) -> torch.Tensor:
        """Backbone confidence at 1/16, resampled to every pyramid scale and concatenated."""
        if (vit.grid_h, vit.grid_w) != (levels[1].grid_h, levels[1].grid_w):
            raise ValueError(
                f"backbone grid {vit.grid_h}x{vit.grid_w} does not match the pyramid's "
                f"1/16 level {levels[1].grid_h}x{levels[1].grid_w}"
            )
        conf16 = self.confidence_from_logits(self.logit_map(vit.tokens, vit.grid_h, vit.grid_w))
        parts = []
        for spec in levels:
            if (spec.grid_h, spec.grid_w) == (vit.grid_h, vit.grid_w):
                aligned = conf16
            else:
                aligned = resample(conf16, spec.grid_h, spec.grid_w, self.resample_mode)
            parts.append(grid_to_tokens(aligned).squeeze(1))
        return torch.cat(parts, dim=0)

    def prior_confidence(self, prior: TokenPyramid) -> torch.Tensor:
        """Per-level confidence on each level's native grid, flattened and concatenated."""
        parts = []
        for i, (spec, stream) in enumerate(zip(prior.levels, ("p8", "p16", "p32"))):
            logits = self.logit_map(prior.level_tokens(i), spec.grid_h, spec.grid_w, stream)
            conf = self.confidence_from_logits(logits)
            parts.append(grid_to_tokens(conf).squeeze(1))
        return torch.cat(parts, dim=0)

    def inject(self, vit: ViTTokens, prior: TokenPyramid) -> ViTTokens:
        """Residual cross-attention from backbone tokens to the prior, scaled per channel."""
        if vit.dim != prior.dim:
            raise ValueError(f"token dimension mismatch: {vit.dim} vs {prior.dim}")
        attended = self.attn(self.query_norm(vit.tokens), self.kv_norm(prior.tokens))
        return vit.with_tokens(vit.tokens + self.gamma * attended)
