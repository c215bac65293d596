import numpy as np
import pytest
import torch

from hfit.backbone import (
    BackboneConfig,
    ViTBackbone,
    load_pretrained,
    save_backbone,
)


def small_backbone(seed=0, **overrides):
    kwargs = dict(embed_dim=16, depth=4, heads=2, stages=4, pos_table_side=4)
    kwargs.update(overrides)
    torch.manual_seed(seed)
    backbone = ViTBackbone(BackboneConfig(**kwargs))
    backbone.reset_parameters(torch.Generator().manual_seed(seed))
    return backbone


def test_config_divisibility_checks():
    with pytest.raises(ValueError, match="evenly"):
        BackboneConfig(depth=7, stages=4)
    with pytest.raises(ValueError, match="heads"):
        BackboneConfig(embed_dim=10, heads=3)
    with pytest.raises(ValueError, match="patch_size"):
        BackboneConfig(patch_size=8)


def test_patch_counts():
    backbone = small_backbone()
    assert backbone.patch_embed(torch.rand(448, 448, 3)).tokens.shape[0] == 784
    assert backbone.patch_embed(torch.rand(64, 64, 3)).tokens.shape[0] == 16


def test_patch_embed_rejects_ragged_sizes():
    backbone = small_backbone()
    with pytest.raises(ValueError, match="divisible"):
        backbone.patch_embed(torch.rand(50, 64, 3))


def test_patch_embed_deterministic():
    backbone = small_backbone()
    raster = torch.rand(64, 64, 3)
    a = backbone.patch_embed(raster)
    b = backbone.patch_embed(raster.clone())
    assert torch.equal(a.tokens, b.tokens)


def test_stage_partition_matches_monolithic_forward():
    backbone = small_backbone()
    raster = torch.rand(64, 64, 3)
    tokens = backbone.patch_embed(raster)
    for stage in range(1, 5):
        tokens = backbone.run_stage(tokens, stage)
    assert torch.equal(tokens.tokens, backbone(raster).tokens)


def test_run_stage_counts_and_bounds():
    backbone = small_backbone()
    tokens = backbone.patch_embed(torch.rand(64, 64, 3))
    out = backbone.run_stage(tokens, 1)
    assert out.tokens.shape == tokens.tokens.shape
    for bad in (0, 5):
        with pytest.raises(IndexError):
            backbone.run_stage(tokens, bad)


def test_zeroed_residual_projections_make_stages_identity():
    backbone = small_backbone()
    with torch.no_grad():
        for layer in backbone.layers:
            layer.attn.proj.weight.zero_()
            layer.attn.proj.bias.zero_()
            layer.fc2.weight.zero_()
            layer.fc2.bias.zero_()
    tokens = backbone.patch_embed(torch.rand(64, 64, 3))
    out = backbone.run_stage(tokens, 1)
    assert torch.equal(out.tokens, tokens.tokens)


def test_attention_rows_are_convex_combinations():
    backbone = small_backbone()
    x = torch.randn(12, 16)
    _, weights = backbone.layers[0].attn(x, return_weights=True)
    sums = weights.sum(dim=-1)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)


def test_freeze_keeps_backbone_bytes_fixed():
    backbone = small_backbone()
    head = torch.nn.Linear(16, 3)
    backbone.freeze()
    before = backbone.checksum()
    params = [p for p in backbone.parameters() if p.requires_grad]
    assert params == []
    optimizer = torch.optim.AdamW(head.parameters(), lr=1e-2)
    raster = torch.rand(64, 64, 3)
    for _ in range(10):
        loss = head(backbone(raster).tokens).square().mean()
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    assert backbone.checksum() == before
    assert head.weight.grad is not None
    assert float(head.weight.grad.abs().sum()) > 0.0


def test_unfrozen_control_changes_checksum():
    backbone = small_backbone()
    before = backbone.checksum()
    optimizer = torch.optim.AdamW(backbone.parameters(), lr=1e-2)
    loss = backbone(torch.rand(64, 64, 3)).tokens.square().mean()
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    assert backbone.checksum() != before


def test_gradients_flow_through_frozen_backbone():
    backbone = small_backbone()
    backbone.freeze()
    raster = torch.rand(64, 64, 3, requires_grad=True)
    loss = backbone(raster).tokens.sum()
    loss.backward()
    assert raster.grad is not None
    assert float(raster.grad.abs().sum()) > 0.0


def test_checkpoint_round_trip_bitwise(tmp_path):
    backbone = small_backbone(seed=5)
    raster = torch.rand(64, 64, 3)
    reference = backbone(raster).tokens
    path = tmp_path / "backbone.pt"
    save_backbone(backbone, path)
    other = small_backbone(seed=9)
    assert not torch.equal(other(raster).tokens, reference)
    load_pretrained(other, path)
    assert torch.equal(other(raster).tokens, reference)


def test_checkpoint_shape_mismatch_names_tensor(tmp_path):
    backbone = small_backbone()
    path = tmp_path / "backbone.pt"
    save_backbone(backbone, path)
    wider = small_backbone(embed_dim=32, heads=2)
    with pytest.raises(ValueError, match="patch_proj"):
        load_pretrained(wider, path)


def test_checkpoint_missing_file(tmp_path):
    backbone = small_backbone()
    with pytest.raises((FileNotFoundError, OSError)):
        load_pretrained(backbone, tmp_path / "nope.pt")


def test_position_table_reinterpolated(tmp_path):
    backbone = small_backbone(pos_table_side=4)
    path = tmp_path / "backbone.pt"
    save_backbone(backbone, path)
    other = small_backbone(seed=3, pos_table_side=8)
    load_pretrained(other, path)
    assert other.pos_table.shape == (64, 16)
    # non-table weights transferred exactly
    assert torch.equal(other.patch_proj.weight, backbone.patch_proj.weight)


def test_position_table_interpolation_only_when_needed():
    backbone = small_backbone(pos_table_side=4)
    table = backbone._pos_for_grid(4, 4)
    assert table.data_ptr() == backbone.pos_table.data_ptr()
    resized = backbone._pos_for_grid(2, 2)
    assert resized.shape == (4, 16)
