import numpy as np
import pytest
import torch

from helpers import desk_config, tiny_config
from hfit.core import flatten_concat
from hfit.data import synth_scene
from hfit.model import (
    ForwardTrace,
    build_model,
    config_fingerprint,
    config_from_dict,
    config_to_dict,
    load_checkpoint,
    save_checkpoint,
)


@pytest.fixture(scope="module")
def tiny_model():
    return build_model(tiny_config())


@pytest.fixture(scope="module")
def tiny_sample():
    return synth_scene(3, 64, 64, 4)


def test_forward_output_shape(tiny_model, tiny_sample):
    tiny_model.eval()
    with torch.no_grad():
        logits = tiny_model(tiny_sample)
    assert logits.shape == (4, 64, 64)


def test_forward_desk_shape():
    model = build_model(desk_config())
    model.eval()
    sample = synth_scene(0, 64, 64, 6)
    with torch.no_grad():
        logits = model(sample)
    assert logits.shape == (6, 64, 64)


def test_gamma_zero_transparency(tiny_model, tiny_sample):
    tiny_model.eval()
    trace = ForwardTrace()
    with torch.no_grad():
        tiny_model(tiny_sample, trace=trace)
        rgb = torch.as_tensor(tiny_sample.rgb, dtype=torch.float32)
        pure = tiny_model.backbone(rgb)
    assert torch.equal(trace.final_vit_tokens, pure.tokens)


def test_forward_deterministic_in_eval(tiny_model, tiny_sample):
    tiny_model.eval()
    with torch.no_grad():
        a = tiny_model(tiny_sample)
        b = tiny_model(tiny_sample)
    assert torch.equal(a, b)


class TestAggregate:
    def make_inputs(self, model):
        gen = torch.Generator().manual_seed(4)
        d = model.config.backbone.embed_dim
        grids = [torch.randn(64 // s, 64 // s, d, generator=gen) for s in (8, 16, 32)]
        prior = flatten_concat(grids)
        vit = model.backbone.patch_embed(torch.rand(64, 64, 3))
        return prior, vit, grids

    def test_zero_vit_leaves_midlevel(self, tiny_model):
        prior, vit, grids = self.make_inputs(tiny_model)
        zero_vit = vit.with_tokens(torch.zeros_like(vit.tokens))
        out = tiny_model.aggregate_outputs(prior, zero_vit)
        assert torch.equal(out[1], grids[1])

    def test_output_shapes(self, tiny_model):
        prior, vit, _ = self.make_inputs(tiny_model)
        out = tiny_model.aggregate_outputs(prior, vit)
        assert [g.shape[:2] for g in out] == [(8, 8), (4, 4), (2, 2)]

    def test_other_levels_pass_through(self, tiny_model):
        prior, vit, grids = self.make_inputs(tiny_model)
        out = tiny_model.aggregate_outputs(prior, vit)
        assert torch.equal(out[0], grids[0])
        assert torch.equal(out[2], grids[2])
        expected_mid = grids[1] + vit.tokens.reshape(4, 4, -1)
        assert torch.equal(out[1], expected_mid)


class TestDecode:
    def test_full_resolution_output(self, tiny_model):
        gen = torch.Generator().manual_seed(5)
        d = tiny_model.config.backbone.embed_dim
        grids = [torch.randn(64 // s, 64 // s, d, generator=gen) for s in (8, 16, 32)]
        logits = tiny_model.decode(grids, (64, 64))
        assert logits.shape == (4, 64, 64)

    def test_zero_classifier_constant_planes(self):
        model = build_model(tiny_config())
        model.eval()
        with torch.no_grad():
            model.decoder.classifier.weight.zero_()
            model.decoder.classifier.bias.copy_(torch.tensor([0.5, -1.0, 2.0, 0.0]))
        gen = torch.Generator().manual_seed(6)
        grids = [torch.randn(64 // s, 64 // s, 16, generator=gen) for s in (8, 16, 32)]
        logits = model.decode(grids, (64, 64))
        for c, bias in enumerate([0.5, -1.0, 2.0, 0.0]):
            plane = logits[c]
            assert torch.allclose(plane, torch.full_like(plane, bias), atol=1e-6)

    def test_argmax_invariant_under_constant_shift(self):
        gen = torch.Generator().manual_seed(8)
        logits = torch.randn(4, 16, 16, generator=gen) * 5.0
        shifted = logits + 3.25
        assert torch.equal(
            torch.softmax(logits, 0).argmax(0), torch.softmax(shifted, 0).argmax(0)
        )


class TestLoss:
    def test_uniform_logits(self, tiny_model):
        logits = torch.zeros(4, 8, 8)
        labels = np.random.default_rng(0).integers(0, 4, size=(8, 8))
        loss = tiny_model.loss(logits, labels)
        assert float(loss) == pytest.approx(np.log(4.0), abs=1e-6)

    def test_all_ignored_returns_zero_with_warning(self, tiny_model):
        logits = torch.zeros(4, 4, 4)
        labels = np.full((4, 4), 255)
        with pytest.warns(UserWarning, match="ignored"):
            loss = tiny_model.loss(logits, labels)
        assert float(loss) == 0.0

    def test_out_of_range_label(self, tiny_model):
        logits = torch.zeros(4, 2, 2)
        labels = np.array([[0, 1], [4, 0]])
        with pytest.raises(ValueError, match="outside"):
            tiny_model.loss(logits, labels)

    def test_confident_correct_below_uniform(self, tiny_model):
        labels = np.zeros((4, 4), dtype=np.int64)
        logits = torch.zeros(4, 4, 4)
        logits[0] = 4.0
        assert float(tiny_model.loss(logits, labels)) < np.log(4.0)

    def test_loss_nonnegative(self, tiny_model, tiny_sample):
        tiny_model.eval()
        with torch.no_grad():
            logits = tiny_model(tiny_sample)
            loss = tiny_model.loss(logits, tiny_sample.labels)
        assert float(loss) >= 0.0


class TestTrainableParameters:
    def test_frozen_excludes_backbone(self):
        model = build_model(tiny_config())
        names = [n for n, _ in model.trainable_parameters()]
        assert names
        assert not any(n.startswith("backbone.") for n in names)
        for prefix in ("dspe.", "rhff.", "hgfi.", "decoder."):
            assert any(n.startswith(prefix) for n in names)

    def test_unfrozen_is_superset(self):
        model = build_model(tiny_config(freeze_backbone=False))
        names = {n for n, _ in model.trainable_parameters()}
        frozen = build_model(tiny_config())
        assert {n for n, _ in frozen.trainable_parameters()} < names

    def test_count_identity(self):
        model = build_model(tiny_config())
        total = sum(p.numel() for _, p in model.named_parameters())
        trainable = sum(p.numel() for _, p in model.trainable_parameters())
        frozen = sum(p.numel() for p in model.backbone.parameters())
        assert trainable + frozen == total


def test_frozen_training_changes_only_adapters():
    model = build_model(tiny_config())
    sample = synth_scene(5, 64, 64, 4)
    checksum_before = model.backbone.checksum()
    snapshot = {n: p.detach().clone() for n, p in model.trainable_parameters()}
    optimizer = torch.optim.AdamW([p for _, p in model.trainable_parameters()], lr=1e-3)
    model.train()
    for _ in range(10):
        loss = model.loss(model(sample), sample.labels)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    assert model.backbone.checksum() == checksum_before
    changed = {n for n, p in model.trainable_parameters()
               if not torch.equal(p.detach(), snapshot[n])}
    for prefix in ("dspe.", "rhff.", "hgfi.", "decoder."):
        assert any(n.startswith(prefix) for n in changed), prefix


def test_loss_decreases_over_windows():
    model = build_model(tiny_config(seed=1))
    sample = synth_scene(8, 64, 64, 4)
    optimizer = torch.optim.AdamW([p for _, p in model.trainable_parameters()], lr=2e-3)
    model.train()
    losses = []
    for _ in range(100):
        loss = model.loss(model(sample), sample.labels)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(loss.item())
    windows = [np.mean(losses[i : i + 10]) for i in range(0, 100, 10)]
    for earlier, later in zip(windows, windows[1:]):
        assert later < earlier, windows


def test_checkpoint_round_trip(tiny_model, tiny_sample, tmp_path):
    tiny_model.eval()
    with torch.no_grad():
        reference = tiny_model(tiny_sample)
    path = tmp_path / "model.pt"
    save_checkpoint(tiny_model, path, iteration=7)
    loaded, payload = load_checkpoint(path)
    loaded.eval()
    assert payload["iteration"] == 7
    with torch.no_grad():
        out = loaded(tiny_sample)
    assert torch.equal(out, reference)
    assert loaded.backbone.frozen


def test_config_dict_round_trip():
    config = tiny_config()
    rebuilt = config_from_dict(config_to_dict(config))
    assert config_fingerprint(rebuilt) == config_fingerprint(config)


def test_config_validation():
    with pytest.raises(ValueError, match="crop_size"):
        tiny_config(crop_size=50)
    with pytest.raises(ValueError, match="num_classes"):
        tiny_config(num_classes=1)
