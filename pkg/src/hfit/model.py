"""Full model assembly: interaction loop, decoder, loss, checkpointing.

The backbone token stream stays pure: per stage it receives only the
zero-γ-transparent cross-attention injection before its encoder layers
run, so at initialization the stream is exactly the frozen ViT forward.
The gated multi-level merge of backbone features feeds the adapter-side
extractor, which refreshes the spatial prior for the next stage. After
the last stage the prior levels and the final backbone grid are summed at
1/16 and decoded by a lightweight fusion head.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import BackboneConfig, ViTBackbone, load_pretrained
from .core import TokenPyramid, ViTTokens, split_levels, tokens_to_grid
from .data import RGBDSample
from .dspe import DSPE, StemConfig
from .hgfi import HGFIStage, StageHistory, integrate_prior, integrate_vit
from .layers import group_norm, init_parameters
from .rhff import RHFFStage, recalibrate

CHECKPOINT_KIND = "hfit-checkpoint"

# Decoder output: a (C, H, W) float tensor at full input resolution.
SegLogits = torch.Tensor


@dataclass
class AblationFlags:
    """Switches that bypass individual mechanisms for controlled comparisons."""

    zero_depth_input: bool = False      # depth branch sees zeros
    zero_rgb_input: bool = False        # stem rgb branch sees zeros (backbone still sees RGB)
    use_vit_weight: bool = True         # (1 - backbone confidence) factor
    use_prior_weight: bool = True       # own-confidence factor
    vit_integration: bool = True        # gated multi-level merge, backbone branch
    prior_integration: bool = True      # gated multi-level merge, prior branch


@dataclass
class HFITConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    stem: StemConfig = field(default_factory=StemConfig)
    num_classes: int = 6
    adapter_heads: int = 3
    entropy_kernel: int = 3
    entropy_dilation: int = 2
    entropy_eps: float = 1e-6
    confidence_resample: str = "bilinear"
    gate_kernels: tuple[int, int, int] = (7, 5, 3)
    ffn_ratio: float = 4.0
    decoder_channels: int = 64
    crop_size: int = 448
    ignore_index: int = 255
    seed: int = 0
    freeze_backbone: bool = True
    backbone_checkpoint: str | None = None
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self) -> None:
        self.gate_kernels = tuple(self.gate_kernels)
        if self.crop_size % 32 != 0:
            raise ValueError(f"crop_size {self.crop_size} must be divisible by 32")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")


def config_to_dict(config: HFITConfig) -> dict:
    return asdict(config)


def config_from_dict(payload: dict) -> HFITConfig:
    payload = dict(payload)
    payload["backbone"] = BackboneConfig(**payload["backbone"])
    payload["stem"] = StemConfig(**payload["stem"])
    payload["ablation"] = AblationFlags(**payload.get("ablation", {}))
    return HFITConfig(**payload)


def config_fingerprint(config: HFITConfig) -> str:
    blob = json.dumps(config_to_dict(config), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class ForwardTrace:
    """Per-stage internals recorded on demand (all detached)."""

    vit_confidences: list[torch.Tensor] = field(default_factory=list)
    prior_confidences: list[torch.Tensor] = field(default_factory=list)
    priors_pre_recalibration: list[torch.Tensor] = field(default_factory=list)
    priors_post_recalibration: list[torch.Tensor] = field(default_factory=list)
    priors_integrated: list[torch.Tensor] = field(default_factory=list)
    vit_gates: list[torch.Tensor] = field(default_factory=list)
    prior_gates: list[torch.Tensor] = field(default_factory=list)
    vit_stage_outputs: list[torch.Tensor] = field(default_factory=list)
    vit_integrated: list[torch.Tensor] = field(default_factory=list)
    final_vit_tokens: torch.Tensor | None = None
    final_prior_tokens: torch.Tensor | None = None


class Decoder(nn.Module):
    """Sum-fusion head: project levels to a common width at 1/8, fuse, classify."""

    def __init__(self, embed_dim: int, channels: int, num_classes: int):
        super().__init__()
        self.level_proj = nn.ModuleList(nn.Conv2d(embed_dim, channels, 1) for _ in range(3))
        self.fuse1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.fuse1_norm = group_norm(channels)
        self.fuse2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.fuse2_norm = group_norm(channels)
        self.classifier = nn.Conv2d(channels, num_classes, 1)

    def forward(self, grids: list[torch.Tensor], out_hw: tuple[int, int]) -> SegLogits:
        if len(grids) != 3:
            raise ValueError("decoder expects three pyramid grids")
        target = grids[0].shape[:2]
        fused = None
        for grid, proj in zip(grids, self.level_proj):
            x = proj(grid.permute(2, 0, 1).unsqueeze(0))
            if grid.shape[:2] != target:
                x = F.interpolate(x, size=target, mode="bilinear", align_corners=False)
            fused = x if fused is None else fused + x
        x = F.gelu(self.fuse1_norm(self.fuse1(fused)))
        x = F.gelu(self.fuse2_norm(self.fuse2(x)))
        x = self.classifier(x)
        x = F.interpolate(x, size=out_hw, mode="bilinear", align_corners=False)
        return x.squeeze(0)


class HFIT(nn.Module):
    def __init__(self, config: HFITConfig):
        super().__init__()
        self.config = config
        n = config.backbone.stages
        d = config.backbone.embed_dim
        self.backbone = ViTBackbone(config.backbone)
        self.dspe = DSPE(config.stem, d)
        self.rhff = nn.ModuleList(
            RHFFStage(
                d, config.num_classes, config.adapter_heads,
                entropy_kernel=config.entropy_kernel,
                entropy_dilation=config.entropy_dilation,
                entropy_eps=config.entropy_eps,
                resample_mode=config.confidence_resample,
            )
            for _ in range(n)
        )
        self.hgfi = nn.ModuleList(
            HGFIStage(d, config.adapter_heads, config.gate_kernels, config.ffn_ratio)
            for _ in range(n)
        )
        self.decoder = Decoder(d, config.decoder_channels, config.num_classes)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        self.backbone.reset_parameters(generator)
        for module in (self.dspe, self.rhff, self.hgfi, self.decoder):
            init_parameters(module, generator)
        for stage in self.rhff:
            nn.init.zeros_(stage.gamma)
            nn.init.zeros_(stage.entropy_conv.bias)

    def _to_tensor(self, array: np.ndarray) -> torch.Tensor:
        param = next(self.parameters())
        return torch.as_tensor(np.ascontiguousarray(array), dtype=param.dtype,
                               device=param.device)

    def forward(self, sample: RGBDSample, trace: ForwardTrace | None = None) -> SegLogits:
        rgb = self._to_tensor(sample.rgb)
        depth3 = self._to_tensor(sample.depth3)
        return self.forward_tensors(rgb, depth3, trace)

    def forward_tensors(self, rgb: torch.Tensor, depth3: torch.Tensor,
                        trace: ForwardTrace | None = None) -> SegLogits:
        flags = self.config.ablation
        h, w = rgb.shape[0], rgb.shape[1]

        stem_rgb = torch.zeros_like(rgb) if flags.zero_rgb_input else rgb
        stem_depth = torch.zeros_like(depth3) if flags.zero_depth_input else depth3
        prior = self.dspe.build_prior(stem_rgb, stem_depth)
        vit = self.backbone.patch_embed(rgb)

        history = StageHistory()
        vit_merged = vit
        for i in range(self.config.backbone.stages):
            rhff_stage: RHFFStage = self.rhff[i]
            hgfi_stage: HGFIStage = self.hgfi[i]

            c_vit = rhff_stage.vit_confidence(vit, prior.levels)
            c_prior = rhff_stage.prior_confidence(prior)
            prior_rec = recalibrate(
                prior, c_vit, c_prior,
                use_vit_weight=flags.use_vit_weight,
                use_prior_weight=flags.use_prior_weight,
            )
            injected = rhff_stage.inject(vit, prior_rec)
            vit = self.backbone.run_stage(injected, i + 1)

            vit_gate = hgfi_stage.vit_gate(vit)
            if flags.vit_integration:
                vit_merged = integrate_vit(vit, vit_gate, history.vit)
            else:
                vit_merged = vit
            history.vit.append((vit.tokens, vit_gate))

            prior_gate = hgfi_stage.prior_gate(prior_rec)
            if flags.prior_integration:
                prior_merged = integrate_prior(prior_rec, prior_gate, history.prior)
            else:
                prior_merged = prior_rec
            history.prior.append((prior_merged.tokens, prior_gate))

            if trace is not None:
                trace.vit_confidences.append(c_vit.detach())
                trace.prior_confidences.append(c_prior.detach())
                trace.priors_pre_recalibration.append(prior.tokens.detach())
                trace.priors_post_recalibration.append(prior_rec.tokens.detach())
                trace.priors_integrated.append(prior_merged.tokens.detach())
                trace.vit_gates.append(vit_gate.detach())
                trace.prior_gates.append(prior_gate.detach())
                trace.vit_stage_outputs.append(vit.tokens.detach())
                trace.vit_integrated.append(vit_merged.tokens.detach())

            prior = hgfi_stage.extract(prior_merged, vit_merged)

        if trace is not None:
            trace.final_vit_tokens = vit.tokens.detach()
            trace.final_prior_tokens = prior.tokens.detach()

        grids = self.aggregate_outputs(prior, vit)
        return self.decoder(grids, (h, w))

    def aggregate_outputs(self, prior: TokenPyramid, vit: ViTTokens) -> list[torch.Tensor]:
        """Merge branches: backbone grid added into the 1/16 prior level."""
        grids = split_levels(prior)
        vit_grid = tokens_to_grid(vit.tokens, vit.grid_h, vit.grid_w)
        if grids[1].shape != vit_grid.shape:
            raise ValueError(
                f"1/16 shapes disagree: prior {tuple(grids[1].shape)} vs "
                f"backbone {tuple(vit_grid.shape)}"
            )
        grids[1] = grids[1] + vit_grid
        return grids

    def decode(self, grids: list[torch.Tensor], out_hw: tuple[int, int]) -> SegLogits:
        return self.decoder(grids, out_hw)

    def loss(self, logits: SegLogits, labels: np.ndarray | torch.Tensor) -> torch.Tensor:
        """Mean per-pixel cross-entropy over non-ignored pixels."""
        ignore = self.config.ignore_index
        num_classes = self.config.num_classes
        labels_t = torch.as_tensor(np.asarray(labels), dtype=torch.long,
                                   device=logits.device)
        if labels_t.shape != logits.shape[1:]:
            raise ValueError(
                f"label shape {tuple(labels_t.shape)} does not match logits "
                f"{tuple(logits.shape[1:])}"
            )
        bad = (labels_t != ignore) & ((labels_t < 0) | (labels_t >= num_classes))
        if bad.any():
            value = int(labels_t[bad].flatten()[0])
            raise ValueError(f"label value {value} outside [0, {num_classes}) and not ignore")
        if bool((labels_t == ignore).all()):
            warnings.warn("all pixels ignored; loss defined as 0", stacklevel=2)
            return logits.sum() * 0.0
        return F.cross_entropy(logits.unsqueeze(0), labels_t.unsqueeze(0),
                               ignore_index=ignore)

    def trainable_parameters(self) -> list[tuple[str, nn.Parameter]]:
        return [(name, p) for name, p in self.named_parameters() if p.requires_grad]


def build_model(config: HFITConfig) -> HFIT:
    """Construct, deterministically initialize, optionally warm-start and freeze."""
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        model = HFIT(config)
        generator = torch.Generator().manual_seed(config.seed)
        model.reset_parameters(generator)
    if config.backbone_checkpoint:
        load_pretrained(model.backbone, config.backbone_checkpoint)
    if config.freeze_backbone:
        model.backbone.freeze()
    return model


def save_checkpoint(model: HFIT, path, iteration: int = 0) -> None:
    torch.save(
        {
            "kind": CHECKPOINT_KIND,
            "version": 1,
            "config": config_to_dict(model.config),
            "fingerprint": config_fingerprint(model.config),
            "iteration": iteration,
            "state": {k: v.detach().cpu() for k, v in model.state_dict().items()},
            "param_names": [name for name, _ in model.named_parameters()],
            "frozen_param_names": [
                name for name, p in model.named_parameters() if not p.requires_grad
            ],
        },
        path,
    )


def read_checkpoint(path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, ValueError):
        raise
    except Exception as exc:
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("kind") != CHECKPOINT_KIND:
        raise ValueError(f"{path} is not a model checkpoint")
    return payload


def load_checkpoint(path) -> tuple[HFIT, dict]:
    payload = read_checkpoint(path)
    config = config_from_dict(payload["config"])
    model = HFIT(config)
    model.load_state_dict(payload["state"])
    if config.freeze_backbone:
        model.backbone.freeze()
    return model, payload
