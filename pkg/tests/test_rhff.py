import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import check_gradients
from hfit.core import LevelSpec, TokenPyramid, ViTTokens, flatten_concat
from hfit.layers import init_parameters
from hfit.rhff import RHFFStage, recalibrate


def make_stage(embed_dim=16, num_classes=4, seed=0, **overrides):
    torch.manual_seed(seed)
    stage = RHFFStage(embed_dim, num_classes, heads=2, **overrides)
    init_parameters(stage, torch.Generator().manual_seed(seed))
    torch.nn.init.zeros_(stage.entropy_conv.bias)
    return stage


def make_pyramid(height=64, width=64, dim=16, seed=0):
    gen = torch.Generator().manual_seed(seed)
    grids = [torch.randn(height // s, width // s, dim, generator=gen) for s in (8, 16, 32)]
    return flatten_concat(grids)


def make_vit(height=64, width=64, dim=16, seed=1):
    gen = torch.Generator().manual_seed(seed)
    gh, gw = height // 16, width // 16
    return ViTTokens(torch.randn(gh * gw, dim, generator=gen), gh, gw)


class TestLogitMap:
    def test_nonnegative(self):
        stage = make_stage()
        vit = make_vit()
        logits = stage.logit_map(vit.tokens, vit.grid_h, vit.grid_w)
        assert logits.detach().min().item() >= 0.0

    def test_zero_head_gives_zero_logits(self):
        stage = make_stage()
        stage.eval()
        with torch.no_grad():
            stage.logit_conv.weight.zero_()
            stage.logit_conv.bias.zero_()
        vit = make_vit()
        logits = stage.logit_map(vit.tokens, vit.grid_h, vit.grid_w)
        assert torch.equal(logits, torch.zeros_like(logits))

    @pytest.mark.parametrize("classes", [3, 19])
    def test_channel_count(self, classes):
        stage = make_stage(num_classes=classes)
        vit = make_vit()
        logits = stage.logit_map(vit.tokens, vit.grid_h, vit.grid_w)
        assert logits.shape == (4, 4, classes)

    def test_reshape_failure(self):
        stage = make_stage()
        with pytest.raises(ValueError, match="cannot reshape"):
            stage.logit_map(torch.randn(5, 16), 2, 2)


class TestConfidenceFromLogits:
    def test_zero_conv_gives_half(self):
        stage = make_stage()
        with torch.no_grad():
            stage.entropy_conv.weight.zero_()
            stage.entropy_conv.bias.zero_()
        conf = stage.confidence_from_logits(torch.rand(4, 4, 4))
        assert torch.equal(conf, torch.full_like(conf, 0.5))

    def test_exact_zero_logits_stay_finite(self):
        stage = make_stage()
        conf = stage.confidence_from_logits(torch.zeros(6, 6, 4))
        assert torch.isfinite(conf).all()
        assert ((conf > 0) & (conf < 1)).all()

    def test_scalar_identity_conv_case(self):
        # single cell with logit 1: the entropy surrogate is -1*log(1+eps) ~ 0,
        # an identity conv passes it through, sigmoid lands at ~0.5
        stage = make_stage(num_classes=1, entropy_kernel=3, entropy_dilation=2)
        with torch.no_grad():
            stage.entropy_conv.weight.zero_()
            stage.entropy_conv.weight[0, 0, 1, 1] = 1.0
            stage.entropy_conv.bias.zero_()
        conf = stage.confidence_from_logits(torch.ones(1, 1, 1))
        assert abs(float(conf) - 0.5) < 1e-6

    def test_strictly_inside_unit_interval(self):
        stage = make_stage()
        conf = stage.confidence_from_logits(torch.rand(8, 8, 4) * 3)
        assert ((conf > 0.0) & (conf < 1.0)).all()


class TestBranchConfidences:
    def test_vit_confidence_length(self):
        stage = make_stage()
        pyramid = make_pyramid()
        conf = stage.vit_confidence(make_vit(), pyramid.levels)
        assert conf.shape == (84,)
        assert ((conf > 0) & (conf < 1)).all()

    def test_constant_confidence_broadcasts_exactly(self):
        stage = make_stage()
        with torch.no_grad():
            stage.entropy_conv.weight.zero_()
            stage.entropy_conv.bias.zero_()
        pyramid = make_pyramid()
        conf = stage.vit_confidence(make_vit(), pyramid.levels)
        assert torch.allclose(conf, torch.full_like(conf, 0.5), atol=1e-6)

    def test_vit_grid_must_match_pyramid(self):
        stage = make_stage()
        pyramid = make_pyramid(96, 96)
        with pytest.raises(ValueError, match="1/16"):
            stage.vit_confidence(make_vit(64, 64), pyramid.levels)

    def test_prior_confidence_length_448(self):
        stage = make_stage(embed_dim=8)
        pyramid = make_pyramid(448, 448, dim=8)
        conf = stage.prior_confidence(pyramid)
        assert conf.shape == (4116,)

    def test_prior_confidence_zero_head(self):
        stage = make_stage()
        with torch.no_grad():
            stage.entropy_conv.weight.zero_()
            stage.entropy_conv.bias.zero_()
        conf = stage.prior_confidence(make_pyramid())
        assert torch.equal(conf, torch.full_like(conf, 0.5))

    def test_prior_confidence_per_level_locality(self):
        stage = make_stage()
        stage.eval()
        pyramid = make_pyramid()
        base = stage.prior_confidence(pyramid)
        perturbed_tokens = pyramid.tokens.clone()
        offset = pyramid.levels[2].token_offset
        perturbed_tokens[offset:] += 3.0
        shifted = stage.prior_confidence(pyramid.with_tokens(perturbed_tokens))
        assert torch.equal(base[:offset], shifted[:offset])
        assert not torch.equal(base[offset:], shifted[offset:])


class TestRecalibrate:
    def test_full_vit_confidence_kills_prior(self):
        pyramid = make_pyramid()
        t = pyramid.token_count
        out = recalibrate(pyramid, torch.ones(t), torch.rand(t))
        assert torch.equal(out.tokens, torch.zeros_like(out.tokens))

    def test_scalar_value(self):
        pyramid = make_pyramid().with_tokens(torch.full((84, 16), 2.0))
        out = recalibrate(pyramid, torch.full((84,), 0.5), torch.full((84,), 0.5))
        assert torch.equal(out.tokens, torch.full((84, 16), 0.5))

    def test_identity_boundary(self):
        pyramid = make_pyramid()
        t = pyramid.token_count
        out = recalibrate(pyramid, torch.zeros(t), torch.ones(t))
        assert torch.equal(out.tokens, pyramid.tokens)

    def test_length_mismatch(self):
        pyramid = make_pyramid()
        with pytest.raises(ValueError, match="length"):
            recalibrate(pyramid, torch.rand(10), torch.rand(pyramid.token_count))

    def test_disabled_weights_identity(self):
        pyramid = make_pyramid()
        t = pyramid.token_count
        out = recalibrate(pyramid, torch.rand(t), torch.rand(t),
                          use_vit_weight=False, use_prior_weight=False)
        assert torch.equal(out.tokens, pyramid.tokens)

    @given(seed=st.integers(0, 2**31))
    @settings(max_examples=25, deadline=None)
    def test_contraction_property(self, seed):
        gen = torch.Generator().manual_seed(seed)
        pyramid = make_pyramid(seed=seed % 17)
        t = pyramid.token_count
        c_v = torch.rand(t, generator=gen)
        c_s = torch.rand(t, generator=gen)
        out = recalibrate(pyramid, c_v, c_s)
        assert (out.tokens.abs() <= pyramid.tokens.abs() + 1e-12).all()
        assert float(out.tokens.abs().max()) <= float(pyramid.tokens.abs().max()) + 1e-12


class TestInject:
    def test_gamma_zero_identity(self):
        stage = make_stage()
        vit = make_vit()
        out = stage.inject(vit, make_pyramid())
        assert torch.equal(out.tokens, vit.tokens)

    def test_attention_rows_sum_to_one(self):
        stage = make_stage()
        vit = make_vit()
        pyramid = make_pyramid()
        _, weights = stage.attn(stage.query_norm(vit.tokens),
                                stage.kv_norm(pyramid.tokens), return_weights=True)
        sums = weights.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)

    def test_dimension_mismatch(self):
        stage = make_stage(embed_dim=16)
        with pytest.raises(ValueError, match="dimension"):
            stage.inject(make_vit(dim=16), make_pyramid(dim=8))

    def test_single_token_degenerate_attention(self):
        stage = make_stage(embed_dim=4, seed=3)
        stage.query_norm = torch.nn.Identity()
        stage.kv_norm = torch.nn.Identity()
        with torch.no_grad():
            stage.gamma.fill_(1.0)
            for proj in (stage.attn.v_proj, stage.attn.o_proj):
                proj.weight.copy_(torch.eye(4))
                proj.bias.zero_()
        vit = ViTTokens(torch.randn(1, 4), 1, 1)
        value = torch.randn(1, 4)
        pyramid = TokenPyramid(
            value.repeat(3, 1),
            (LevelSpec(8, 1, 1, 0), LevelSpec(16, 1, 1, 1), LevelSpec(32, 1, 1, 2)),
        )
        out = stage.inject(vit, pyramid)
        assert torch.allclose(out.tokens, vit.tokens + value, atol=1e-6)


def test_composed_pathway_gradients_match_finite_differences():
    torch.manual_seed(0)
    stage = make_stage(embed_dim=8, num_classes=3, seed=4).double()
    stage.eval()
    with torch.no_grad():
        stage.gamma.normal_(0.0, 0.5)  # nonzero so attention parameters matter
    pyramid = make_pyramid(32, 32, dim=8, seed=5).with_tokens(
        make_pyramid(32, 32, dim=8, seed=5).tokens.double()
    )
    vit = make_vit(32, 32, dim=8, seed=6)
    vit = vit.with_tokens(vit.tokens.double())
    weight = torch.randn(vit.tokens.shape, dtype=torch.float64)

    def objective():
        c_v = stage.vit_confidence(vit, pyramid.levels)
        c_s = stage.prior_confidence(pyramid)
        rec = recalibrate(pyramid, c_v, c_s)
        out = stage.inject(vit, rec)
        return (out.tokens * weight).sum()

    checked, failures = check_gradients(
        objective, list(stage.named_parameters()), n_samples=50, seed=7
    )
    assert checked and not failures, failures


def test_entropy_eps_must_be_positive():
    with pytest.raises(ValueError, match="eps"):
        RHFFStage(8, 3, heads=2, entropy_eps=0.0)
