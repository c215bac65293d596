"""Plain ViT backbone, frozen and split into sequential stages.

The backbone is a patch embedding plus a homogeneous stack of pre-norm
encoder layers at a single 1/16 token scale, with a learned absolute
position table and no class token. The stack is evenly partitioned into
stages so the adapter can interleave with it; composing the stages is
numerically identical to the monolithic forward pass.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ViTTokens
from .layers import init_parameters

CHECKPOINT_KIND = "hfit-backbone"


@dataclass
class BackboneConfig:
    embed_dim: int = 192
    depth: int = 8
    heads: int = 3
    patch_size: int = 16
    stages: int = 4
    mlp_ratio: float = 4.0
    pos_table_side: int = 28

    def __post_init__(self) -> None:
        if self.patch_size != 16:
            raise ValueError(f"patch_size is fixed at 16, got {self.patch_size}")
        if self.depth % self.stages != 0:
            raise ValueError(f"depth {self.depth} must split evenly into {self.stages} stages")
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.pos_table_side < 1:
            raise ValueError("pos_table_side must be positive")

    @property
    def layers_per_stage(self) -> int:
        return self.depth // self.stages


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        n, d = x.shape
        qkv = self.qkv(x).reshape(n, 3, self.heads, self.head_dim)
        q, k, v = (qkv[:, i].transpose(0, 1) for i in range(3))
        weights = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(self.head_dim), dim=-1)
        out = (weights @ v).transpose(0, 1).reshape(n, d)
        out = self.proj(out)
        if return_weights:
            return out, weights
        return out


class EncoderLayer(nn.Module):
    """Pre-norm self-attention and MLP residual blocks."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return x


class ViTBackbone(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.patch_proj = nn.Conv2d(3, config.embed_dim, config.patch_size, stride=config.patch_size)
        self.pos_table = nn.Parameter(
            torch.zeros(config.pos_table_side * config.pos_table_side, config.embed_dim)
        )
        self.layers = nn.ModuleList(
            EncoderLayer(config.embed_dim, config.heads, config.mlp_ratio)
            for _ in range(config.depth)
        )
        self.frozen = False
        self.reset_parameters()

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        init_parameters(self, generator)
        nn.init.trunc_normal_(self.pos_table, std=0.02, a=-0.04, b=0.04, generator=generator)

    def _pos_for_grid(self, grid_h: int, grid_w: int) -> torch.Tensor:
        side = self.config.pos_table_side
        if (grid_h, grid_w) == (side, side):
            return self.pos_table
        table = self.pos_table.reshape(side, side, -1).permute(2, 0, 1).unsqueeze(0)
        table = F.interpolate(table, size=(grid_h, grid_w), mode="bicubic", align_corners=False)
        return table.squeeze(0).permute(1, 2, 0).reshape(grid_h * grid_w, -1)

    def patch_embed(self, rgb: torch.Tensor) -> ViTTokens:
        """Project an (H, W, 3) raster in [0, 1] to position-encoded 1/16 tokens."""
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) raster, got shape {tuple(rgb.shape)}")
        h, w = rgb.shape[0], rgb.shape[1]
        if h % 32 != 0 or w % 32 != 0:
            raise ValueError(f"input size {h}x{w} must be divisible by 32")
        x = self.patch_proj(rgb.permute(2, 0, 1).unsqueeze(0))
        gh, gw = x.shape[2], x.shape[3]
        tokens = x.squeeze(0).permute(1, 2, 0).reshape(gh * gw, -1)
        tokens = tokens + self._pos_for_grid(gh, gw)
        return ViTTokens(tokens=tokens, grid_h=gh, grid_w=gw)

    def run_stage(self, tokens: ViTTokens, stage_index: int) -> ViTTokens:
        """Apply the stage's depth/stages encoder layers. stage_index is 1-based."""
        if not 1 <= stage_index <= self.config.stages:
            raise IndexError(f"stage_index {stage_index} outside [1..{self.config.stages}]")
        per = self.config.layers_per_stage
        x = tokens.tokens
        for layer in self.layers[(stage_index - 1) * per : stage_index * per]:
            x = layer(x)
        return tokens.with_tokens(x)

    def forward(self, rgb: torch.Tensor) -> ViTTokens:
        """Monolithic forward: patch embedding plus every encoder layer."""
        tokens = self.patch_embed(rgb)
        for stage in range(1, self.config.stages + 1):
            tokens = self.run_stage(tokens, stage)
        return tokens

    def freeze(self) -> None:
        """Exclude backbone parameters from training; gradients still flow through."""
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(True)
        self.frozen = False

    def checksum(self) -> str:
        """Stable digest of all parameter bytes, for immutability checks."""
        digest = hashlib.sha256()
        for name, param in sorted(self.named_parameters()):
            digest.update(name.encode())
            digest.update(param.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()


def save_backbone(backbone: ViTBackbone, path) -> None:
    torch.save(
        {
            "kind": CHECKPOINT_KIND,
            "config": asdict(backbone.config),
            "state": {k: v.detach().cpu() for k, v in backbone.state_dict().items()},
        },
        path,
    )


def load_pretrained(backbone: ViTBackbone, path) -> None:
    """Replace backbone parameters from a saved store.

    The position table is re-interpolated when the stored side differs;
    every other tensor must match shape exactly.
    """
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, ValueError):
        raise
    except Exception as exc:
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("kind") != CHECKPOINT_KIND:
        raise ValueError(f"{path} is not a backbone checkpoint")
    stored_cfg = BackboneConfig(**payload["config"])
    state = dict(payload["state"])
    if stored_cfg.pos_table_side != backbone.config.pos_table_side:
        side = stored_cfg.pos_table_side
        table = state["pos_table"].reshape(side, side, -1).permute(2, 0, 1).unsqueeze(0)
        target = backbone.config.pos_table_side
        table = F.interpolate(table, size=(target, target), mode="bicubic", align_corners=False)
        state["pos_table"] = table.squeeze(0).permute(1, 2, 0).reshape(target * target, -1)
    current = backbone.state_dict()
    # the patch projection carries the embed dimension; report it first on mismatch
    ordered = ["patch_proj.weight", "patch_proj.bias"]
    ordered += [n for n in current if n not in ordered]
    for name in ordered:
        if name not in state:
            raise ValueError(f"checkpoint is missing tensor {name!r}")
        if tuple(state[name].shape) != tuple(current[name].shape):
            raise ValueError(
                f"shape mismatch for {name!r}: checkpoint {tuple(state[name].shape)} "
                f"vs model {tuple(current[name].shape)}"
            )
    backbone.load_state_dict(state)
